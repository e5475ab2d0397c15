#pragma once

#include "auditlm/ingest.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace auditlm {

inline constexpr int kNoPatient = -1;
// Patients past the per-shift cap share this index.
inline constexpr int kOovPatient = -2;

inline constexpr std::int64_t kDefaultShiftGapSeconds = 21600;
inline constexpr std::int64_t kDefaultSessionGapSeconds = 300;
inline constexpr int kDefaultPatientCap = 128;
inline constexpr int kNumDeltaBins = 5;

struct ShiftRow {
  std::string metric_name;
  std::optional<std::string> pat_id;
  int patient_index = kNoPatient;  // filled by remap_patients
  double delta_seconds = 0.0;
};

struct Shift {
  std::string user_id;
  std::size_t shift_index = 0;
  std::vector<ShiftRow> rows;
  std::vector<std::string> patient_map;  // position == assigned index
};

struct SessionRow {
  std::string metric_name;
  int patient_index = kNoPatient;
  int delta_bin = 0;

  bool operator==(const SessionRow&) const = default;
};

struct Provenance {
  std::string user_id;
  std::size_t shift_index = 0;
  std::size_t session_index = 0;
  std::size_t chunk_index = 0;

  bool operator==(const Provenance&) const = default;
};

struct Session {
  std::vector<SessionRow> rows;
  Provenance provenance;

  bool operator==(const Session&) const = default;
};

// Upper edges e_k = max_seconds^(k/(bins-1)); five logarithmic bins over [0, 240] s.
struct QuantizerSpec {
  std::array<double, kNumDeltaBins> edges{};
  std::array<std::string, kNumDeltaBins> labels{};

  static QuantizerSpec standard(double max_seconds = 240.0);
};

// Gap >= gap_s starts a new shift. Deltas are raw gaps within the shift, first row 0.
std::vector<Shift> split_shifts(const ClinicianStream& stream,
                                std::int64_t gap_s = kDefaultShiftGapSeconds);

Shift remap_patients(Shift shift, int cap = kDefaultPatientCap);

// Gap > gap_s starts a new session; every session's first row gets bin 0.
std::vector<Session> split_sessions(const Shift& shift, const QuantizerSpec& quantizer,
                                    std::int64_t gap_s = kDefaultSessionGapSeconds);

int quantize_delta(double delta_s, const QuantizerSpec& spec);

std::vector<Session> chunk_session(const Session& session, std::size_t max_rows);

struct PreprocessConfig {
  std::int64_t shift_gap_s = kDefaultShiftGapSeconds;
  std::int64_t session_gap_s = kDefaultSessionGapSeconds;
  int patient_cap = kDefaultPatientCap;
  double quantizer_max_s = 240.0;
  std::size_t max_rows = 341;
};

// ingest output -> chunked sessions, in stream order.
std::vector<Session> preprocess(const std::vector<ClinicianStream>& streams,
                                const PreprocessConfig& config = {});

// Line-delimited dump:
//   #session <user_id>\t<shift>\t<session>\t<chunk>\t<rows>
//   <metric_name>\t<patient_index>\t<delta_bin>
void write_sessions(std::ostream& out, const std::vector<Session>& sessions);
std::vector<Session> read_sessions(std::istream& in);

std::string patient_label(int patient_index);

}  // namespace auditlm
