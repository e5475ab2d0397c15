#include "auditlm/ingest.hpp"

#include "auditlm/common.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <istream>
#include <iterator>
#include <ostream>
#include <sstream>
#include <unordered_map>

namespace auditlm {

namespace {

constexpr std::string_view kRequiredColumns[] = {"USER_ID", "METRIC_NAME", "PAT_ID", "ACCESS_TIME",
                                                 "ACCESS_INSTANT"};

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

template <typename Int>
std::optional<Int> parse_int(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  Int value{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return value;
}

bool all_digits(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

}  // namespace

std::vector<CsvRecord> read_csv_records(std::istream& in) {
  std::vector<CsvRecord> records;
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (text.size() >= 3 && text.compare(0, 3, "\xEF\xBB\xBF") == 0) text.erase(0, 3);

  std::size_t line = 1;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    CsvRecord rec;
    rec.line = line;
    std::string field;
    bool in_quotes = false;
    bool record_done = false;
    while (i < n && !record_done) {
      char c = text[i];
      if (in_quotes) {
        if (c == '"') {
          if (i + 1 < n && text[i + 1] == '"') {
            field.push_back('"');
            i += 2;
          } else {
            in_quotes = false;
            ++i;
          }
        } else {
          if (c == '\n') ++line;
          field.push_back(c);
          ++i;
        }
        continue;
      }
      switch (c) {
        case '"':
          in_quotes = true;
          ++i;
          break;
        case ',':
          rec.fields.push_back(std::move(field));
          field.clear();
          ++i;
          break;
        case '\r':
          ++i;
          break;
        case '\n':
          ++line;
          ++i;
          record_done = true;
          break;
        default:
          field.push_back(c);
          ++i;
      }
    }
    if (in_quotes) throw RowError(rec.line, "unterminated quoted field");
    rec.fields.push_back(std::move(field));
    // Blank lines carry no record.
    if (rec.fields.size() == 1 && rec.fields[0].empty()) continue;
    records.push_back(std::move(rec));
  }
  return records;
}

std::optional<std::int64_t> parse_access_time(std::string_view text) {
  text = trim(text);
  if (all_digits(text)) return parse_int<std::int64_t>(text);

  // YYYY-MM-DD[T ]HH:MM:SS
  if (text.size() < 19) return std::nullopt;
  auto num = [&](std::size_t pos, std::size_t len) -> std::optional<int> {
    auto part = text.substr(pos, len);
    if (!all_digits(part)) return std::nullopt;
    return parse_int<int>(part);
  };
  if (text[4] != '-' || text[7] != '-' || (text[10] != 'T' && text[10] != ' ') || text[13] != ':' ||
      text[16] != ':')
    return std::nullopt;
  auto year = num(0, 4), month = num(5, 2), day = num(8, 2);
  auto hour = num(11, 2), minute = num(14, 2), second = num(17, 2);
  if (!year || !month || !day || !hour || !minute || !second) return std::nullopt;
  if (*hour > 23 || *minute > 59 || *second > 60) return std::nullopt;

  using namespace std::chrono;
  const year_month_day ymd{std::chrono::year{*year}, std::chrono::month{static_cast<unsigned>(*month)},
                           std::chrono::day{static_cast<unsigned>(*day)}};
  if (!ymd.ok()) return std::nullopt;

  std::size_t pos = 19;
  if (pos < text.size() && text[pos] == '.') {
    ++pos;
    std::size_t start = pos;
    while (pos < text.size() && text[pos] >= '0' && text[pos] <= '9') ++pos;
    if (pos == start) return std::nullopt;
  }
  std::int64_t offset_s = 0;
  if (pos < text.size()) {
    if (text[pos] == 'Z' && pos + 1 == text.size()) {
      ++pos;
    } else if ((text[pos] == '+' || text[pos] == '-') && text.size() - pos == 6 && text[pos + 3] == ':') {
      auto oh = num(pos + 1, 2), om = num(pos + 4, 2);
      if (!oh || !om) return std::nullopt;
      offset_s = (*oh * 3600 + *om * 60) * (text[pos] == '+' ? 1 : -1);
      pos = text.size();
    } else {
      return std::nullopt;
    }
  }
  if (pos != text.size()) return std::nullopt;

  const auto days = sys_days{ymd}.time_since_epoch().count();
  return static_cast<std::int64_t>(days) * 86400 + *hour * 3600 + *minute * 60 + *second - offset_s;
}

ClinicianStream sort_events(ClinicianStream stream) {
  std::stable_sort(stream.events.begin(), stream.events.end(),
                   [](const RawAuditEvent& a, const RawAuditEvent& b) {
                     if (a.access_time != b.access_time) return a.access_time < b.access_time;
                     return a.access_instant < b.access_instant;
                   });
  return stream;
}

std::vector<ClinicianStream> parse_audit_csv(std::istream& in) {
  auto records = read_csv_records(in);
  if (records.empty()) throw SchemaError("USER_ID");

  const auto& header = records.front().fields;
  std::unordered_map<std::string, std::size_t> column_index;
  for (std::size_t c = 0; c < header.size(); ++c) column_index.emplace(std::string(trim(header[c])), c);
  std::size_t cols[5];
  for (std::size_t k = 0; k < 5; ++k) {
    auto it = column_index.find(std::string(kRequiredColumns[k]));
    if (it == column_index.end()) throw SchemaError(std::string(kRequiredColumns[k]));
    cols[k] = it->second;
  }
  const std::size_t needed = *std::max_element(std::begin(cols), std::end(cols)) + 1;

  std::vector<ClinicianStream> streams;
  std::unordered_map<std::string, std::size_t> stream_of;
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& rec = records[r];
    if (rec.fields.size() < needed)
      throw RowError(rec.line, "expected at least " + std::to_string(needed) + " fields, got " +
                                   std::to_string(rec.fields.size()));
    RawAuditEvent ev;
    ev.user_id = rec.fields[cols[0]];
    ev.metric_name = rec.fields[cols[1]];
    if (ev.user_id.empty()) throw RowError(rec.line, "empty USER_ID");
    if (ev.metric_name.empty()) throw RowError(rec.line, "empty METRIC_NAME");
    if (!rec.fields[cols[2]].empty()) ev.pat_id = rec.fields[cols[2]];

    auto t = parse_access_time(rec.fields[cols[3]]);
    if (!t) throw RowError(rec.line, "ACCESS_TIME is neither epoch seconds nor ISO-8601: '" +
                                         rec.fields[cols[3]] + "'");
    if (*t < 0) throw RowError(rec.line, "ACCESS_TIME is negative");
    ev.access_time = *t;

    const auto& instant_text = rec.fields[cols[4]];
    if (trim(instant_text).empty()) {
      ev.access_instant = 0;
    } else {
      auto inst = parse_int<std::int64_t>(instant_text);
      if (!inst || *inst < 0) throw RowError(rec.line, "ACCESS_INSTANT must be a nonnegative integer");
      ev.access_instant = *inst;
    }

    auto [it, inserted] = stream_of.emplace(ev.user_id, streams.size());
    if (inserted) streams.push_back(ClinicianStream{ev.user_id, {}});
    streams[it->second].events.push_back(std::move(ev));
  }
  for (auto& s : streams) s = sort_events(std::move(s));
  return streams;
}

std::vector<ClinicianStream> parse_audit_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  return parse_audit_csv(in);
}

std::string csv_escape(std::string_view field) {
  const bool needs_quotes = field.find_first_of(",\"\r\n") != std::string_view::npos ||
                            (!field.empty() && (field.front() == ' ' || field.back() == ' '));
  if (!needs_quotes) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

void write_audit_csv(std::ostream& out, std::span<const ClinicianStream> streams) {
  out << "USER_ID,METRIC_NAME,PAT_ID,ACCESS_TIME,ACCESS_INSTANT\n";
  for (const auto& s : streams) {
    for (const auto& ev : s.events) {
      out << csv_escape(ev.user_id) << ',' << csv_escape(ev.metric_name) << ','
          << (ev.pat_id ? csv_escape(*ev.pat_id) : std::string{}) << ',' << ev.access_time << ','
          << ev.access_instant << '\n';
    }
  }
}

}  // namespace auditlm
