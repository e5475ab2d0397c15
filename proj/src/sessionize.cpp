#include "auditlm/sessionize.hpp"

#include "auditlm/common.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <string_view>
#include <unordered_map>

namespace auditlm {

namespace {

// 3 decimals, trailing zeros trimmed: 3.93598 -> "3.936", 240 -> "240".
std::string format_edge(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3f", value);
  std::string s(buf);
  while (!s.empty() && s.back() == '0') s.pop_back();
  if (!s.empty() && s.back() == '.') s.pop_back();
  return s;
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      parts.push_back(line.substr(start));
      return parts;
    }
    parts.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

template <typename Int>
Int to_int(std::string_view s, std::size_t line) {
  Int v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw RowError(line, "expected integer, got '" + std::string(s) + "'");
  return v;
}

}  // namespace

QuantizerSpec QuantizerSpec::standard(double max_seconds) {
  if (!(max_seconds > 1.0)) throw ConfigError("quantizer max must exceed 1 second");
  QuantizerSpec spec;
  for (int k = 0; k < kNumDeltaBins; ++k) {
    spec.edges[k] = std::pow(max_seconds, static_cast<double>(k) / (kNumDeltaBins - 1));
    spec.labels[k] = format_edge(spec.edges[k]);
  }
  spec.labels[0] = "≤ 1";
  return spec;
}

std::vector<Shift> split_shifts(const ClinicianStream& stream, std::int64_t gap_s) {
  std::vector<Shift> shifts;
  const RawAuditEvent* prev = nullptr;
  for (const auto& ev : stream.events) {
    const std::int64_t gap = prev ? ev.access_time - prev->access_time : 0;
    if (!prev || gap >= gap_s) {
      shifts.push_back(Shift{stream.user_id, shifts.size(), {}, {}});
      shifts.back().rows.push_back(ShiftRow{ev.metric_name, ev.pat_id, kNoPatient, 0.0});
    } else {
      shifts.back().rows.push_back(
          ShiftRow{ev.metric_name, ev.pat_id, kNoPatient, static_cast<double>(gap)});
    }
    prev = &ev;
  }
  return shifts;
}

Shift remap_patients(Shift shift, int cap) {
  std::unordered_map<std::string, int> index_of;
  shift.patient_map.clear();
  for (auto& row : shift.rows) {
    if (!row.pat_id) {
      row.patient_index = kNoPatient;
      continue;
    }
    auto it = index_of.find(*row.pat_id);
    if (it != index_of.end()) {
      row.patient_index = it->second;
      continue;
    }
    if (static_cast<int>(shift.patient_map.size()) < cap) {
      const int idx = static_cast<int>(shift.patient_map.size());
      shift.patient_map.push_back(*row.pat_id);
      index_of.emplace(*row.pat_id, idx);
      row.patient_index = idx;
    } else {
      index_of.emplace(*row.pat_id, kOovPatient);
      row.patient_index = kOovPatient;
    }
  }
  return shift;
}

int quantize_delta(double delta_s, const QuantizerSpec& spec) {
  if (!(delta_s >= 0.0)) throw ContractViolation("time delta must be nonnegative");
  for (int k = 0; k < kNumDeltaBins; ++k)
    if (delta_s <= spec.edges[k]) return k;
  return kNumDeltaBins - 1;
}

std::vector<Session> split_sessions(const Shift& shift, const QuantizerSpec& quantizer,
                                    std::int64_t gap_s) {
  std::vector<Session> sessions;
  for (std::size_t i = 0; i < shift.rows.size(); ++i) {
    const auto& row = shift.rows[i];
    const bool starts = i == 0 || row.delta_seconds > static_cast<double>(gap_s);
    if (starts) {
      sessions.push_back(Session{{}, Provenance{shift.user_id, shift.shift_index, sessions.size(), 0}});
    }
    const int bin = starts ? 0 : quantize_delta(row.delta_seconds, quantizer);
    sessions.back().rows.push_back(SessionRow{row.metric_name, row.patient_index, bin});
  }
  return sessions;
}

std::vector<Session> chunk_session(const Session& session, std::size_t max_rows) {
  if (max_rows < 1) throw ContractViolation("chunk size must be at least one row");
  std::vector<Session> chunks;
  for (std::size_t start = 0; start < session.rows.size(); start += max_rows) {
    const std::size_t end = std::min(session.rows.size(), start + max_rows);
    Session chunk;
    chunk.provenance = session.provenance;
    chunk.provenance.chunk_index = chunks.size();
    chunk.rows.assign(session.rows.begin() + static_cast<std::ptrdiff_t>(start),
                      session.rows.begin() + static_cast<std::ptrdiff_t>(end));
    chunks.push_back(std::move(chunk));
  }
  return chunks;
}

std::vector<Session> preprocess(const std::vector<ClinicianStream>& streams,
                                const PreprocessConfig& config) {
  const auto quantizer = QuantizerSpec::standard(config.quantizer_max_s);
  std::vector<Session> out;
  for (const auto& stream : streams) {
    for (auto& shift : split_shifts(stream, config.shift_gap_s)) {
      const auto remapped = remap_patients(std::move(shift), config.patient_cap);
      for (const auto& session : split_sessions(remapped, quantizer, config.session_gap_s)) {
        for (auto& chunk : chunk_session(session, config.max_rows)) out.push_back(std::move(chunk));
      }
    }
  }
  return out;
}

std::string patient_label(int patient_index) {
  if (patient_index == kOovPatient) return "OOV";
  return std::to_string(patient_index);
}

void write_sessions(std::ostream& out, const std::vector<Session>& sessions) {
  for (const auto& s : sessions) {
    out << "#session " << s.provenance.user_id << '\t' << s.provenance.shift_index << '\t'
        << s.provenance.session_index << '\t' << s.provenance.chunk_index << '\t' << s.rows.size()
        << '\n';
    for (const auto& r : s.rows)
      out << r.metric_name << '\t' << patient_label(r.patient_index) << '\t' << r.delta_bin << '\n';
  }
}

std::vector<Session> read_sessions(std::istream& in) {
  std::vector<Session> sessions;
  std::string line;
  std::size_t lineno = 0;
  std::size_t expected_rows = 0;
  constexpr std::string_view kHeader = "#session ";
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::string_view view(line);
    if (view.substr(0, kHeader.size()) == kHeader) {
      if (!sessions.empty() && sessions.back().rows.size() != expected_rows)
        throw RowError(lineno, "previous session has fewer rows than its header declares");
      auto parts = split_tabs(view.substr(kHeader.size()));
      if (parts.size() != 5) throw RowError(lineno, "malformed session header");
      Session s;
      s.provenance.user_id = std::string(parts[0]);
      s.provenance.shift_index = to_int<std::size_t>(parts[1], lineno);
      s.provenance.session_index = to_int<std::size_t>(parts[2], lineno);
      s.provenance.chunk_index = to_int<std::size_t>(parts[3], lineno);
      expected_rows = to_int<std::size_t>(parts[4], lineno);
      sessions.push_back(std::move(s));
      continue;
    }
    if (sessions.empty()) throw RowError(lineno, "row before any session header");
    auto parts = split_tabs(view);
    if (parts.size() != 3) throw RowError(lineno, "expected 3 tab-separated fields");
    SessionRow row;
    row.metric_name = std::string(parts[0]);
    row.patient_index = parts[1] == "OOV" ? kOovPatient : to_int<int>(parts[1], lineno);
    row.delta_bin = to_int<int>(parts[2], lineno);
    if (row.delta_bin < 0 || row.delta_bin >= kNumDeltaBins) throw RowError(lineno, "delta bin out of range");
    sessions.back().rows.push_back(std::move(row));
  }
  if (!sessions.empty() && sessions.back().rows.size() != expected_rows)
    throw RowError(lineno, "last session has fewer rows than its header declares");
  return sessions;
}

}  // namespace auditlm
