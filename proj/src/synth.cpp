#include "auditlm/synth.hpp"

#include "auditlm/ingest.hpp"
#include "auditlm/sessionize.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace auditlm {

using nlohmann::json;

namespace {

constexpr std::int64_t kBaseEpoch = 1672642800;  // 2023-01-02T07:00:00Z

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % bound;
}

template <typename Range>
std::size_t categorical(std::mt19937_64& rng, const Range& probs) {
  const double u = uniform01(rng);
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < std::size(probs); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last = i;
    if (u < acc) return i;
  }
  return last;
}

void check_distribution(const std::vector<double>& row, const std::string& what) {
  double sum = 0.0;
  for (double p : row) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw ConfigError(what + " has a negative or non-finite entry");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError(what + " sums to " + std::to_string(sum) + ", not 1");
}

// Integer seconds whose quantized bin is b.
std::vector<std::vector<int>> seconds_by_bin() {
  const auto q = QuantizerSpec::standard();
  std::vector<std::vector<int>> out(kNumDeltaBins);
  for (int s = 0; s <= 240; ++s) out[static_cast<std::size_t>(quantize_delta(s, q))].push_back(s);
  return out;
}

std::string iso_time(std::int64_t epoch) {
  const std::time_t t = static_cast<std::time_t>(epoch);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<double> start_distribution(const ProcessSpec& spec) {
  return spec.initial.empty() ? stationary_distribution(spec.transition) : spec.initial;
}

PatientProcess patient_from_json(const json& j) {
  PatientProcess p;
  p.keep = j.value("keep", p.keep);
  p.none = j.value("none", p.none);
  p.switch_ = j.value("switch", p.switch_);
  return p;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined value
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

const std::array<double, 5>& ProcessSpec::delta_row(std::size_t action) const {
  return delta_bins.size() == 1 ? delta_bins[0] : delta_bins.at(action);
}

const PatientProcess& ProcessSpec::patient_row(std::size_t action) const {
  return patients.size() == 1 ? patients[0] : patients.at(action);
}

void ProcessSpec::validate() const {
  const std::size_t n = actions.size();
  if (n == 0) throw ConfigError("process needs at least one action");
  if (transition.size() != n) throw ConfigError("transition matrix must have one row per action");
  for (std::size_t i = 0; i < n; ++i) {
    if (transition[i].size() != n) throw ConfigError("transition row " + std::to_string(i) + " has the wrong length");
    check_distribution(transition[i], "transition row " + std::to_string(i));
  }
  if (!initial.empty()) {
    if (initial.size() != n) throw ConfigError("initial distribution has the wrong length");
    check_distribution(initial, "initial distribution");
  }
  if (delta_bins.size() != 1 && delta_bins.size() != n)
    throw ConfigError("delta_bins needs one shared row or one row per action");
  for (const auto& row : delta_bins) check_distribution(std::vector<double>(row.begin(), row.end()), "delta bin row");
  if (patients.size() != 1 && patients.size() != n)
    throw ConfigError("patients needs one shared entry or one entry per action");
  for (const auto& p : patients) check_distribution({p.keep, p.none, p.switch_}, "patient process");
  if (pool_size < 1 || pool_size > kDefaultPatientCap) throw ConfigError("pool_size must lie in [1, 128]");
  if (session_rows_min < 1 || session_rows_max < session_rows_min) throw ConfigError("invalid session_rows range");
  if (sessions_per_shift < 1) throw ConfigError("sessions_per_shift must be at least 1");
  if (session_gap_s <= kDefaultSessionGapSeconds || session_gap_s >= kDefaultShiftGapSeconds)
    throw ConfigError("session_gap_s must lie in (300, 21600)");
  if (shift_gap_s < kDefaultShiftGapSeconds) throw ConfigError("shift_gap_s must be at least 21600");
}

ProcessSpec ProcessSpec::from_json(std::string_view text) {
  ProcessSpec s;
  try {
    const auto j = json::parse(text);
    s.actions = j.at("actions").get<std::vector<std::string>>();
    s.transition = j.at("transition").get<std::vector<std::vector<double>>>();
    if (j.contains("initial") && j["initial"].is_array()) s.initial = j["initial"].get<std::vector<double>>();
    if (j.contains("delta_bins")) {
      const auto& d = j["delta_bins"];
      if (!d.empty() && d[0].is_number())
        s.delta_bins = {d.get<std::array<double, 5>>()};
      else
        s.delta_bins = d.get<std::vector<std::array<double, 5>>>();
    }
    if (j.contains("patients")) {
      const auto& p = j["patients"];
      s.patients.clear();
      if (p.is_array())
        for (const auto& e : p) s.patients.push_back(patient_from_json(e));
      else
        s.patients.push_back(patient_from_json(p));
    }
    s.pool_size = j.value("pool_size", s.pool_size);
    if (j.contains("session_rows")) {
      const auto r = j["session_rows"].get<std::array<int, 2>>();
      s.session_rows_min = r[0];
      s.session_rows_max = r[1];
    }
    s.sessions_per_shift = j.value("sessions_per_shift", s.sessions_per_shift);
    s.session_gap_s = j.value("session_gap_s", s.session_gap_s);
    s.shift_gap_s = j.value("shift_gap_s", s.shift_gap_s);
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid process spec: ") + e.what());
  }
  if (s.delta_bins.empty()) s.delta_bins.push_back({0.2, 0.2, 0.2, 0.2, 0.2});
  if (s.patients.empty()) s.patients.push_back(PatientProcess{});
  s.validate();
  return s;
}

std::string ProcessSpec::to_json() const {
  json j;
  j["actions"] = actions;
  j["transition"] = transition;
  if (initial.empty())
    j["initial"] = "stationary";
  else
    j["initial"] = initial;
  j["delta_bins"] = delta_bins;
  json p = json::array();
  for (const auto& e : patients) p.push_back({{"keep", e.keep}, {"none", e.none}, {"switch", e.switch_}});
  j["patients"] = p;
  j["pool_size"] = pool_size;
  j["session_rows"] = {session_rows_min, session_rows_max};
  j["sessions_per_shift"] = sessions_per_shift;
  j["session_gap_s"] = session_gap_s;
  j["shift_gap_s"] = shift_gap_s;
  j["seed"] = seed;
  return j.dump(2);
}

ProcessSpec load_process_spec(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open process spec: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ProcessSpec::from_json(ss.str());
}

ProcessSpec uniform_process(std::size_t n_actions) {
  ProcessSpec s;
  for (std::size_t i = 0; i < n_actions; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "A%02zu", i);
    s.actions.emplace_back(name);
  }
  s.transition.assign(n_actions, std::vector<double>(n_actions, 1.0 / static_cast<double>(n_actions)));
  s.delta_bins.push_back({0.2, 0.2, 0.2, 0.2, 0.2});
  s.patients.push_back(PatientProcess{});
  return s;
}

std::vector<double> stationary_distribution(const std::vector<std::vector<double>>& P) {
  const std::size_t n = P.size();
  if (n == 0) throw ConfigError("empty transition matrix");
  // Irreducible iff every state reaches and is reached from state 0.
  for (int direction = 0; direction < 2; ++direction) {
    std::vector<char> seen(n, 0);
    std::vector<std::size_t> stack{0};
    seen[0] = 1;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      for (std::size_t j = 0; j < n; ++j) {
        const double p = direction == 0 ? P[i][j] : P[j][i];
        if (p > 0.0 && !seen[j]) {
          seen[j] = 1;
          stack.push_back(j);
        }
      }
    }
    if (std::find(seen.begin(), seen.end(), 0) != seen.end())
      throw ConfigError("transition matrix is reducible; no unique stationary distribution");
  }
  std::vector<double> pi(n, 1.0 / static_cast<double>(n)), next(n);
  for (int iter = 0; iter < 1000000; ++iter) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) next[j] += pi[i] * 0.5 * (P[i][j] + (i == j ? 1.0 : 0.0));
    const double total = std::accumulate(next.begin(), next.end(), 0.0);
    double diff = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      next[j] /= total;
      diff = std::max(diff, std::abs(next[j] - pi[j]));
    }
    pi.swap(next);
    if (diff < 1e-12) return pi;
  }
  throw ConfigError("stationary distribution did not converge");
}

double true_entropy_rate(const ProcessSpec& spec, EntropyWeighting weighting) {
  const auto w = weighting == EntropyWeighting::Stationary || spec.initial.empty() ? stationary_distribution(spec.transition)
                                                                                  : spec.initial;
  double h = 0.0;
  for (std::size_t i = 0; i < spec.transition.size(); ++i) {
    double row = 0.0;
    for (double p : spec.transition[i])
      if (p > 0.0) row -= p * std::log(p);
    h += w[i] * row;
  }
  return h;
}

std::vector<std::size_t> sample_chain(const ProcessSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  out.reserve(n);
  if (n == 0) return out;
  out.push_back(categorical(rng, start_distribution(spec)));
  while (out.size() < n) out.push_back(categorical(rng, spec.transition[out.back()]));
  return out;
}

GeneratedLogs generate_logs(const ProcessSpec& spec, std::size_t n_clinicians, std::size_t n_events_per_clinician,
                            std::uint64_t seed) {
  spec.validate();
  const auto start = start_distribution(spec);
  const auto seconds = seconds_by_bin();
  GeneratedLogs logs;
  logs.clinicians = n_clinicians;
  std::ostringstream out;
  out << "USER_ID,METRIC_NAME,PAT_ID,ACCESS_TIME,ACCESS_INSTANT\n";

  for (std::size_t c = 0; c < n_clinicians; ++c) {
    std::mt19937_64 rng(mix_seed(seed, c));
    char user[32];
    std::snprintf(user, sizeof user, "C%04zu", c);
    std::int64_t t = kBaseEpoch + static_cast<std::int64_t>(c) * 60;
    std::size_t emitted = 0, shift = 0;
    int session_in_shift = 0;
    while (emitted < n_events_per_clinician) {
      if (session_in_shift == spec.sessions_per_shift) {
        session_in_shift = 0;
        ++shift;
        t += spec.shift_gap_s;
      } else if (emitted > 0) {
        t += spec.session_gap_s;
      }
      if (session_in_shift == 0) ++logs.shifts;
      ++session_in_shift;
      ++logs.sessions;

      const auto span = static_cast<std::uint64_t>(spec.session_rows_max - spec.session_rows_min + 1);
      const std::size_t rows = std::min<std::size_t>(
          n_events_per_clinician - emitted, static_cast<std::size_t>(spec.session_rows_min) + uniform_below(rng, span));
      int patient = -1;  // index into the shift pool
      std::size_t action = 0;
      for (std::size_t r = 0; r < rows; ++r) {
        action = r == 0 ? categorical(rng, start) : categorical(rng, spec.transition[action]);
        if (r > 0) {
          const auto bin = categorical(rng, spec.delta_row(action));
          const auto& choices = seconds[bin];
          t += choices[uniform_below(rng, choices.size())];
        }
        const auto& pp = spec.patient_row(action);
        switch (categorical(rng, std::array<double, 3>{pp.keep, pp.none, pp.switch_})) {
          case 0:
            break;
          case 1:
            patient = -1;
            break;
          default:
            patient = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(spec.pool_size)));
        }
        out << user << ',' << csv_escape(spec.actions[action]) << ',';
        if (patient >= 0) out << 'P' << c << '-' << shift << '-' << patient;
        out << ',' << iso_time(t) << ',' << emitted << '\n';
        ++emitted;
      }
    }
  }
  logs.events = n_clinicians * n_events_per_clinician;
  logs.csv = out.str();
  return logs;
}

}  // namespace auditlm
