#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "lime/model.hpp"

namespace lime {

/// One logged impression with the engagement history that preceded it.
struct Example {
  std::uint64_t user_id = 0;
  std::vector<std::uint64_t> history;
  std::vector<std::int64_t> history_time;
  std::uint64_t item_id = 0;
  std::int64_t timestamp = 0;
  int label = 0;
  std::vector<double> context;

  bool operator==(const Example&) const = default;
};

/// Impressions of one user sharing a timestamp and a history. Training and
/// scoring work per session so the user side is computed once.
struct Session {
  std::uint64_t user_id = 0;
  std::vector<std::uint64_t> history;
  std::vector<std::int64_t> history_time;
  std::vector<double> context;
  std::int64_t timestamp = 0;
  std::vector<std::uint64_t> items;
  std::vector<int> labels;

  std::size_t size() const noexcept { return items.size(); }
  bool operator==(const Session&) const = default;
};

/// Item id → categorical attribute ids (1-based; 0 is reserved for unknown).
class Catalog {
 public:
  Catalog() = default;
  explicit Catalog(std::vector<std::string> attributes) : names_(std::move(attributes)), vocab_(names_.size(), 0) {}

  const std::vector<std::string>& attributes() const noexcept { return names_; }
  const std::vector<std::size_t>& vocab() const noexcept { return vocab_; }
  std::size_t size() const noexcept { return items_.size(); }
  const std::map<std::uint64_t, ItemFeatures>& items() const noexcept { return items_; }

  /// Adds an item or confirms it matches the stored features.
  void put(std::uint64_t id, ItemFeatures f) {
    if (f.size() != names_.size())
      throw std::invalid_argument("item " + std::to_string(id) + " has " + std::to_string(f.size()) +
                                  " attributes, catalog declares " + std::to_string(names_.size()));
    auto [it, fresh] = items_.emplace(id, f);
    if (!fresh && it->second != f)
      throw std::invalid_argument("item " + std::to_string(id) + " seen with conflicting attributes");
    for (std::size_t a = 0; a < f.size(); ++a) vocab_[a] = std::max(vocab_[a], f[a]);
  }

  /// Features of `id`; unknown items map to all-zero (the OOV row).
  ItemFeatures features(std::uint64_t id) const {
    auto it = items_.find(id);
    return it == items_.end() ? ItemFeatures(names_.size(), 0) : it->second;
  }

  /// Attribute specs for a model config, one embedding of width `dim` each.
  std::vector<AttributeSpec> attribute_specs(std::size_t dim) const {
    std::vector<AttributeSpec> out;
    for (std::size_t a = 0; a < names_.size(); ++a) out.push_back({names_[a], vocab_[a], dim});
    return out;
  }

  bool operator==(const Catalog&) const = default;

 private:
  std::vector<std::string> names_;
  std::vector<std::size_t> vocab_;
  std::map<std::uint64_t, ItemFeatures> items_;
};

struct Dataset {
  Catalog catalog;
  std::vector<Session> sessions;

  std::size_t example_count() const {
    std::size_t n = 0;
    for (const auto& s : sessions) n += s.size();
    return n;
  }

  std::vector<Example> examples() const {
    std::vector<Example> out;
    for (const auto& s : sessions)
      for (std::size_t i = 0; i < s.size(); ++i)
        out.push_back({s.user_id, s.history, s.history_time, s.items[i], s.timestamp, s.labels[i], s.context});
    return out;
  }

  std::size_t positives() const {
    std::size_t n = 0;
    for (const auto& s : sessions)
      for (int l : s.labels) n += l != 0;
    return n;
  }
};

// ---------------------------------------------------------------------------
// Synthetic planted-interest data

/// Users hold several latent interest vectors; an item's affinity for a user
/// is the best match over interests minus an offset. History is sampled with
/// probability ∝ softmax(affinity / history_temperature), candidates are
/// uniform, labels ~ Bernoulli(sigmoid(affinity / temperature)).
struct SyntheticSpec {
  std::size_t users = 2500;
  std::size_t items = 2000;
  std::size_t latent_dim = 4;
  std::size_t interests = 3;
  std::size_t model_dim = 32;  ///< only checked: latent_dim must fit
  std::size_t history_min = 24;
  std::size_t history_max = 64;
  std::size_t test_extra_history = 8;  ///< events between the train and test sessions
  std::size_t train_candidates = 8;
  std::size_t test_candidates = 2;
  double interest_scale = 2.0;
  double affinity_offset = 2.0;
  double temperature = 0.5;  ///< 0 gives deterministic labels: affinity > 0
  double history_temperature = 0.5;
  std::size_t context_dim = 8;
  double context_noise = 0.5;
  std::size_t latent_buckets = 16; ///< per latent coordinate attribute
  bool item_id_attribute = true;   ///< false: items are described by latent buckets only
  std::uint64_t seed = 1;

  void validate() const {
    if (users == 0 || items == 0) throw std::invalid_argument("synthetic spec needs at least one user and one item");
    if (latent_dim == 0 || interests == 0) throw std::invalid_argument("latent_dim and interests must be positive");
    if (latent_dim > model_dim)
      throw std::invalid_argument("latent_dim " + std::to_string(latent_dim) + " exceeds model dim " +
                                  std::to_string(model_dim));
    if (history_min > history_max) throw std::invalid_argument("history_min exceeds history_max");
    if (train_candidates == 0 || test_candidates == 0) throw std::invalid_argument("sessions need candidates");
    if (temperature < 0 || history_temperature <= 0) throw std::invalid_argument("temperatures must be positive");
    if (latent_buckets < 2) throw std::invalid_argument("latent_buckets must be at least 2");
  }
};

/// Latent state behind a synthetic dataset, kept so tests can check labels.
struct SyntheticWorld {
  std::size_t latent_dim = 0;
  std::vector<std::vector<double>> user_interests;  ///< per user: interests × latent_dim, row-major
  std::vector<std::vector<double>> item_latent;     ///< per item: latent_dim
  double offset = 0;

  /// Users and items are 1-based ids.
  double affinity(std::uint64_t user, std::uint64_t item) const {
    const auto& u = user_interests.at(user - 1);
    const auto& v = item_latent.at(item - 1);
    double best = -INFINITY;
    for (std::size_t i = 0; i < u.size() / latent_dim; ++i) {
      double s = 0;
      for (std::size_t c = 0; c < latent_dim; ++c) s += u[i * latent_dim + c] * v[c];
      best = std::max(best, s);
    }
    return best - offset;
  }
};

struct SyntheticData {
  Dataset train, test;
  SyntheticWorld world;
};

inline double label_probability(double affinity, double temperature) {
  if (temperature == 0) return affinity > 0 ? 1.0 : 0.0;
  return 1.0 / (1.0 + std::exp(-affinity / temperature));
}

/// Evenly spaced bucket boundaries over ±1.5 standard deviations.
inline Bucketizer latent_bucketizer(std::size_t buckets) {
  std::vector<double> b;
  for (std::size_t i = 1; i < buckets; ++i) b.push_back(-1.5 + 3.0 * double(i) / double(buckets));
  return Bucketizer(std::move(b));
}

/// Items carry their id (optional) plus each latent coordinate bucketized. Each user has
/// a train session after `history_min..history_max` events and a test session
/// after `test_extra_history` more.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t k = spec.latent_dim;

  SyntheticData out;
  SyntheticWorld& w = out.world;
  w.latent_dim = k;
  w.offset = spec.affinity_offset;

  std::vector<std::string> attrs;
  if (spec.item_id_attribute) attrs.push_back("item");
  for (std::size_t c = 0; c < k; ++c) attrs.push_back("latent" + std::to_string(c));
  Catalog catalog(attrs);
  const Bucketizer bucket = latent_bucketizer(spec.latent_buckets);
  for (std::size_t i = 0; i < spec.items; ++i) {
    std::vector<double> v(k);
    ItemFeatures f;
    if (spec.item_id_attribute) f.push_back(i + 1);
    for (auto& x : v) {
      x = normal(rng);
      f.push_back(bucket.bucket(x));
    }
    w.item_latent.push_back(std::move(v));
    catalog.put(i + 1, std::move(f));
  }

  const double us = spec.interest_scale / std::sqrt(double(k));
  std::vector<double> proj(spec.context_dim * spec.interests * k);
  for (auto& x : proj) x = normal(rng) / std::sqrt(double(spec.interests * k));
  for (std::size_t u = 0; u < spec.users; ++u) {
    std::vector<double> v(spec.interests * k);
    for (auto& x : v) x = us * normal(rng);
    w.user_interests.push_back(std::move(v));
  }

  out.train.catalog = catalog;
  out.test.catalog = catalog;
  std::uniform_int_distribution<std::size_t> hist_len(spec.history_min, spec.history_max);
  std::uniform_int_distribution<std::uint64_t> any_item(1, spec.items);
  std::vector<double> weights(spec.items);
  for (std::size_t u = 0; u < spec.users; ++u) {
    const std::uint64_t uid = u + 1;
    double top = -INFINITY;
    for (std::size_t i = 0; i < spec.items; ++i) {
      weights[i] = w.affinity(uid, i + 1) / spec.history_temperature;
      top = std::max(top, weights[i]);
    }
    for (auto& x : weights) x = std::exp(x - top);
    std::discrete_distribution<std::size_t> engaged(weights.begin(), weights.end());

    std::vector<double> ctx(spec.context_dim);
    const auto& interests = w.user_interests[u];
    for (std::size_t c = 0; c < spec.context_dim; ++c) {
      double s = 0;
      for (std::size_t j = 0; j < interests.size(); ++j) s += proj[c * interests.size() + j] * interests[j];
      ctx[c] = s + spec.context_noise * normal(rng);
    }

    std::vector<std::uint64_t> history;
    std::vector<std::int64_t> times;
    std::int64_t t = 0;
    auto engage = [&](std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) {
        history.push_back(engaged(rng) + 1);
        times.push_back(++t);
      }
    };
    auto session = [&](std::size_t m) {
      Session s{uid, history, times, ctx, ++t, {}, {}};
      for (std::size_t i = 0; i < m; ++i) {
        const std::uint64_t item = any_item(rng);
        s.items.push_back(item);
        s.labels.push_back(unit(rng) < label_probability(w.affinity(uid, item), spec.temperature) ? 1 : 0);
      }
      return s;
    };
    engage(hist_len(rng));
    out.train.sessions.push_back(session(spec.train_candidates));
    engage(spec.test_extra_history);
    out.test.sessions.push_back(session(spec.test_candidates));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

/// Declared columns after user_id,item_id,timestamp,label.
struct CsvSchema {
  std::vector<std::string> item_attributes;
  std::vector<std::string> context_columns;
  std::size_t max_seq_len = 256;
};

class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct IngestStats {
  std::size_t rows = 0;
  std::size_t users = 0;
  std::size_t unsorted_users = 0;  ///< users whose rows were out of time order
  std::size_t truncated_histories = 0;
};

inline CsvSchema csv_schema_for(const Dataset& d, std::size_t max_seq_len = 256) {
  CsvSchema s;
  s.item_attributes = d.catalog.attributes();
  const std::size_t dc = d.sessions.empty() ? 0 : d.sessions.front().context.size();
  for (std::size_t c = 0; c < dc; ++c) s.context_columns.push_back("ctx_" + std::to_string(c));
  s.max_seq_len = max_seq_len;
  return s;
}

/// History rows (label 1) first, then the session's impressions; one block
/// per session. Users must be unique since ingest treats a user's latest
/// timestamp as its session.
inline void write_csv(const Dataset& d, std::ostream& out) {
  const CsvSchema schema = csv_schema_for(d);
  out << "user_id,item_id,timestamp,label";
  for (const auto& a : schema.item_attributes) out << ',' << a;
  for (const auto& c : schema.context_columns) out << ',' << c;
  out << '\n';
  std::vector<std::uint64_t> seen;
  char buf[32];
  for (const auto& s : d.sessions) {
    if (s.context.size() != schema.context_columns.size())
      throw std::invalid_argument("user " + std::to_string(s.user_id) + " has a context of different width");
    seen.push_back(s.user_id);
    auto row = [&](std::uint64_t item, std::int64_t ts, int label) {
      out << s.user_id << ',' << item << ',' << ts << ',' << label;
      for (std::size_t f : d.catalog.features(item)) out << ',' << f;
      for (double c : s.context) {
        auto r = std::to_chars(buf, buf + sizeof buf, c);
        out << ',' << std::string_view(buf, static_cast<std::size_t>(r.ptr - buf));
      }
      out << '\n';
    };
    for (std::size_t i = 0; i < s.history.size(); ++i) row(s.history[i], s.history_time[i], 1);
    for (std::size_t i = 0; i < s.size(); ++i) row(s.items[i], s.timestamp, s.labels[i]);
  }
  std::sort(seen.begin(), seen.end());
  if (std::adjacent_find(seen.begin(), seen.end()) != seen.end())
    throw std::invalid_argument("write_csv: a user appears in more than one session");
}

inline void write_csv(const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_csv(d, out);
  if (!out) throw std::runtime_error("short write to " + path);
}

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> f;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i)
    if (i == line.size() || line[i] == ',') {
      f.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  return f;
}

template <class V>
V parse_field(std::string_view s, std::size_t line, const std::string& column) {
  V v{};
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw CsvError("line " + std::to_string(line) + ": column " + column + ": cannot parse '" + std::string(s) + "'");
  return v;
}

}  // namespace detail

/// Groups rows per user (in order of first appearance) and sorts them by
/// timestamp. Rows at a user's latest timestamp become the session; earlier
/// rows are its history, keeping the max_seq_len most recent.
inline Dataset ingest_csv(std::istream& in, const CsvSchema& schema, IngestStats* stats = nullptr) {
  if (schema.max_seq_len == 0) throw std::invalid_argument("max_seq_len must be positive");
  IngestStats st;
  std::string line;
  if (!std::getline(in, line)) throw CsvError("line 1: missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_csv(line);
  const std::vector<std::string> fixed{"user_id", "item_id", "timestamp", "label"};
  for (std::size_t i = 0; i < fixed.size(); ++i)
    if (i >= header.size() || header[i] != fixed[i])
      throw CsvError("line 1: header must start with user_id,item_id,timestamp,label");
  std::unordered_map<std::string, std::size_t> col;
  for (std::size_t i = fixed.size(); i < header.size(); ++i) {
    if (!col.emplace(std::string(header[i]), i).second) throw CsvError("line 1: duplicate column " + std::string(header[i]));
  }
  std::vector<std::size_t> attr_col, ctx_col;
  for (const auto& a : schema.item_attributes) {
    if (!col.count(a)) throw CsvError("line 1: missing attribute column " + a);
    attr_col.push_back(col[a]);
  }
  for (const auto& c : schema.context_columns) {
    if (!col.count(c)) throw CsvError("line 1: missing context column " + c);
    ctx_col.push_back(col[c]);
  }
  if (header.size() != fixed.size() + attr_col.size() + ctx_col.size())
    for (const auto& [name, _] : col)
      if (std::find(schema.item_attributes.begin(), schema.item_attributes.end(), name) == schema.item_attributes.end() &&
          std::find(schema.context_columns.begin(), schema.context_columns.end(), name) == schema.context_columns.end())
        throw CsvError("line 1: undeclared column " + name);

  struct Row {
    std::uint64_t item;
    std::int64_t ts;
    int label;
    std::vector<double> ctx;
  };
  Dataset d;
  d.catalog = Catalog(schema.item_attributes);
  std::vector<std::uint64_t> order;
  std::unordered_map<std::uint64_t, std::vector<Row>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != header.size())
      throw CsvError("line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                     " fields, got " + std::to_string(f.size()));
    const auto user = detail::parse_field<std::uint64_t>(f[0], lineno, "user_id");
    Row r{detail::parse_field<std::uint64_t>(f[1], lineno, "item_id"),
          detail::parse_field<std::int64_t>(f[2], lineno, "timestamp"),
          detail::parse_field<int>(f[3], lineno, "label"),
          {}};
    if (r.label != 0 && r.label != 1)
      throw CsvError("line " + std::to_string(lineno) + ": label must be 0 or 1, got " + std::string(f[3]));
    ItemFeatures feats;
    for (std::size_t a = 0; a < attr_col.size(); ++a)
      feats.push_back(detail::parse_field<std::size_t>(f[attr_col[a]], lineno, schema.item_attributes[a]));
    for (std::size_t c = 0; c < ctx_col.size(); ++c)
      r.ctx.push_back(detail::parse_field<double>(f[ctx_col[c]], lineno, schema.context_columns[c]));
    try {
      d.catalog.put(r.item, std::move(feats));
    } catch (const std::invalid_argument& e) {
      throw CsvError("line " + std::to_string(lineno) + ": " + e.what());
    }
    auto [it, fresh] = rows.try_emplace(user);
    if (fresh) order.push_back(user);
    it->second.push_back(std::move(r));
    ++st.rows;
  }

  for (std::uint64_t user : order) {
    auto& rs = rows[user];
    if (!std::is_sorted(rs.begin(), rs.end(), [](const Row& a, const Row& b) { return a.ts < b.ts; })) {
      ++st.unsorted_users;
      std::stable_sort(rs.begin(), rs.end(), [](const Row& a, const Row& b) { return a.ts < b.ts; });
    }
    const std::int64_t last = rs.back().ts;
    std::size_t first_last = rs.size();
    while (first_last > 0 && rs[first_last - 1].ts == last) --first_last;
    Session s;
    s.user_id = user;
    s.timestamp = last;
    s.context = rs[first_last].ctx;
    const std::size_t begin = first_last > schema.max_seq_len ? first_last - schema.max_seq_len : 0;
    if (begin > 0) ++st.truncated_histories;
    for (std::size_t i = begin; i < first_last; ++i) {
      s.history.push_back(rs[i].item);
      s.history_time.push_back(rs[i].ts);
    }
    for (std::size_t i = first_last; i < rs.size(); ++i) {
      s.items.push_back(rs[i].item);
      s.labels.push_back(rs[i].label);
    }
    d.sessions.push_back(std::move(s));
  }
  st.users = order.size();
  if (stats) *stats = st;
  return d;
}

inline Dataset ingest_csv(const std::string& path, const CsvSchema& schema, IngestStats* stats = nullptr) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return ingest_csv(in, schema, stats);
}

/// Schema read off a header line: columns named ctx_* are context, every
/// other column after the fixed four is an item attribute.
inline CsvSchema csv_schema_from_header(std::string_view header, std::size_t max_seq_len = 256) {
  if (!header.empty() && header.back() == '\r') header.remove_suffix(1);
  const auto cols = detail::split_csv(header);
  if (cols.size() < 4) throw CsvError("line 1: header must start with user_id,item_id,timestamp,label");
  CsvSchema s;
  s.max_seq_len = max_seq_len;
  for (std::size_t i = 4; i < cols.size(); ++i) {
    std::string c(cols[i]);
    (c.rfind("ctx_", 0) == 0 ? s.context_columns : s.item_attributes).push_back(std::move(c));
  }
  return s;
}

/// Reads a CSV whose schema is given by its own header.
inline Dataset ingest_csv_file(const std::string& path, std::size_t max_seq_len = 256, IngestStats* stats = nullptr) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string header;
  if (!std::getline(in, header)) throw CsvError(path + ": line 1: missing header");
  in.seekg(0);
  return ingest_csv(in, csv_schema_from_header(header, max_seq_len), stats);
}

}  // namespace lime
