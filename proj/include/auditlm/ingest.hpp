#pragma once

#include "auditlm/common.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace auditlm {

struct RawAuditEvent {
  std::string user_id;
  std::string metric_name;
  std::optional<std::string> pat_id;
  std::int64_t access_time = 0;     // epoch seconds
  std::int64_t access_instant = 0;  // sub-second ordinal

  bool operator==(const RawAuditEvent&) const = default;
};

// Events of one clinician, sorted by (access_time, access_instant).
struct ClinicianStream {
  std::string user_id;
  std::vector<RawAuditEvent> events;

  bool operator==(const ClinicianStream&) const = default;
};

// Splits CSV text into records of fields (RFC 4180 quoting, CRLF or LF).
// Each record carries the 1-based line number it started on.
struct CsvRecord {
  std::size_t line = 0;
  std::vector<std::string> fields;
};
std::vector<CsvRecord> read_csv_records(std::istream& in);

// Parses USER_ID,METRIC_NAME,PAT_ID,ACCESS_TIME,ACCESS_INSTANT (any column order,
// extra columns ignored). Streams come back in order of first USER_ID appearance,
// each one already sorted.
std::vector<ClinicianStream> parse_audit_csv(std::istream& in);
std::vector<ClinicianStream> parse_audit_csv(std::string_view text);

// Stable sort by (access_time, access_instant).
ClinicianStream sort_events(ClinicianStream stream);

// Accepts integer epoch seconds or an ISO-8601 datetime
// (YYYY-MM-DD[T ]HH:MM:SS[.frac][Z|+HH:MM|-HH:MM]). Returns nullopt otherwise.
std::optional<std::int64_t> parse_access_time(std::string_view text);

void write_audit_csv(std::ostream& out, std::span<const ClinicianStream> streams);

std::string csv_escape(std::string_view field);

}  // namespace auditlm
