#pragma once

#include "auditlm/common.hpp"

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace auditlm {

// Patient choice for each event: stay with the current patient, drop to none, or
// switch to a uniform draw from the shift's pool.
struct PatientProcess {
  double keep = 0.8;
  double none = 0.1;
  double switch_ = 0.1;
};

struct ProcessSpec {
  std::vector<std::string> actions;
  std::vector<std::vector<double>> transition;  // row i: next-action distribution after action i
  std::vector<double> initial;                  // empty: stationary distribution
  // Delta bin distribution per destination action (one row per action) or one shared row.
  std::vector<std::array<double, 5>> delta_bins{{{0.2, 0.2, 0.2, 0.2, 0.2}}};
  // One process per destination action, or one shared entry.
  std::vector<PatientProcess> patients{PatientProcess{}};
  int pool_size = 3;
  int session_rows_min = 8;
  int session_rows_max = 32;
  int sessions_per_shift = 4;
  std::int64_t session_gap_s = 600;
  std::int64_t shift_gap_s = 43200;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t size() const { return actions.size(); }
  const std::array<double, 5>& delta_row(std::size_t action) const;
  const PatientProcess& patient_row(std::size_t action) const;

  static ProcessSpec from_json(std::string_view text);
  std::string to_json() const;
};

ProcessSpec load_process_spec(const std::string& path);

// Uniform transitions over n actions named A00, A01, ...
ProcessSpec uniform_process(std::size_t n_actions);

struct GeneratedLogs {
  std::string csv;
  std::size_t clinicians = 0;
  std::size_t shifts = 0;
  std::size_t sessions = 0;
  std::size_t events = 0;
};

// USER_ID,METRIC_NAME,PAT_ID,ACCESS_TIME,ACCESS_INSTANT rows. Each session starts from the
// initial distribution; session and shift boundaries follow the cadence parameters.
GeneratedLogs generate_logs(const ProcessSpec& spec, std::size_t n_clinicians, std::size_t n_events_per_clinician,
                            std::uint64_t seed);

// A single chain trajectory of action indices starting from the initial distribution.
std::vector<std::size_t> sample_chain(const ProcessSpec& spec, std::size_t n, std::uint64_t seed);

enum class EntropyWeighting { Stationary, Initial };

// Stationary distribution by power iteration on (P + I) / 2 to 1e-12. Throws ConfigError
// when the chain is reducible.
std::vector<double> stationary_distribution(const std::vector<std::vector<double>>& transition);

// H = sum_i w_i sum_j P_ij (-ln P_ij), nats per action.
double true_entropy_rate(const ProcessSpec& spec, EntropyWeighting weighting = EntropyWeighting::Stationary);

// Derived per-clinician seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace auditlm
