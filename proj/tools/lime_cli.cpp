// Command-line front end: data generation, training, evaluation, cache
// building, cached scoring, latency sweeps and spectral analysis.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>

#include "lime/lime.hpp"

namespace fs = std::filesystem;
using namespace lime;

namespace {

/// Bad flags or flag combinations; reported with the subcommand help.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Args {
  std::string command;
  std::string config, out, data, test, checkpoint, cache, skyline, model, axis, grid;
  std::optional<std::uint64_t> seed;
  std::optional<int> precision;
};

struct Run {
  RunConfig cfg;
  json raw;  ///< config file contents, to tell explicit keys from defaults
  fs::path out;
};

bool has_key(const json& j, const char* section, const char* key) {
  return j.contains(section) && j.at(section).is_object() && j.at(section).contains(key);
}

Run resolve(const Args& a) {
  Run r;
  r.raw = a.config.empty() ? json::object() : read_json_file(a.config);
  r.cfg = parse_run_config(r.raw, a.seed);
  if (a.precision) {
    if (*a.precision != 32 && *a.precision != 64) throw UsageError("--precision must be 32 or 64");
    r.cfg.precision = *a.precision;
  }
  try {
    if (!a.model.empty()) r.cfg.model.kind = parse_model_kind(a.model);
    if (!a.axis.empty()) r.cfg.sweep.axis = parse_axis(a.axis);
    if (!a.grid.empty()) r.cfg.sweep.grid = parse_grid(a.grid);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  json cli = {{"command", a.command}};
  for (auto [k, v] : {std::pair{"config", &a.config}, std::pair{"out", &a.out}, std::pair{"data", &a.data},
                      std::pair{"test", &a.test}, std::pair{"checkpoint", &a.checkpoint}, std::pair{"cache", &a.cache},
                      std::pair{"skyline", &a.skyline}})
    if (!v->empty()) cli[k] = *v;
  r.cfg.cli = cli;
  r.out = a.out;
  fs::create_directories(r.out);
  return r;
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("short write to " + p.string());
}

void echo_config(const Run& r) { write_file(r.out / "config.json", run_config_to_json(r.cfg).dump(2) + "\n"); }

Dataset load_data(const std::string& path, std::size_t max_seq_len) {
  IngestStats st;
  Dataset d = ingest_csv_file(path, max_seq_len, &st);
  if (d.sessions.empty()) throw std::runtime_error(path + ": no sessions");
  std::cout << path << ": " << st.rows << " rows, " << st.users << " users";
  if (st.unsorted_users) std::cout << ", " << st.unsorted_users << " re-sorted";
  if (st.truncated_histories) std::cout << ", " << st.truncated_histories << " histories truncated";
  std::cout << "\n";
  return d;
}

std::size_t context_width(const Dataset& d) { return d.sessions.front().context.size(); }

// --- subcommands -------------------------------------------------------------

int gen_data(Run& r) {
  r.cfg.synthetic.model_dim = r.cfg.model.d;
  echo_config(r);
  const auto data = generate_synthetic(r.cfg.synthetic);
  write_csv(data.train, (r.out / "train.csv").string());
  write_csv(data.test, (r.out / "test.csv").string());
  std::cout << "train: " << data.train.example_count() << " examples, test: " << data.test.example_count()
            << " examples\n";
  return 0;
}

template <class T>
int train_cmd(Run& r) {
  const auto& args = r.cfg.cli;
  Dataset data = load_data(args.at("data"), r.cfg.model.max_seq_len);
  if (!has_key(r.raw, "model", "item_attributes"))
    r.cfg.model.item_attributes = data.catalog.attribute_specs(r.cfg.train.attribute_dim);
  if (!has_key(r.raw, "model", "context_dim")) r.cfg.model.context_dim = context_width(data);
  r.cfg.model.validate();
  echo_config(r);
  Model<T> model(r.cfg.model);
  TrainOptions opt;
  opt.epochs = r.cfg.train.epochs;
  opt.max_steps = r.cfg.train.max_steps;
  opt.shuffle = r.cfg.train.shuffle;
  const auto res = train(model, data, opt);
  std::string log = "step,loss\n";
  for (std::size_t i = 0; i < res.losses.size(); ++i) log += std::to_string(i + 1) + "," + std::to_string(res.losses[i]) + "\n";
  write_file(r.out / "train_log.csv", log);
  save_checkpoint(model, (r.out / "model.ckpt").string());
  std::cout << "trained " << model_kind_name(model.kind()) << ": " << res.steps << " steps, final loss "
            << (res.losses.empty() ? 0.0 : res.losses.back()) << "\n";
  if (args.contains("test")) {
    const Dataset test = load_data(args.at("test"), r.cfg.model.max_seq_len);
    const auto rep = evaluate(model, test);
    write_file(r.out / "metrics.csv", EvalReport::csv_header() + "\n" + rep.csv_row() + "\n");
    std::cout << rep.key_values() << "\n";
  }
  return 0;
}

template <class T>
Model<T> load_model(Run& r) {
  Model<T> m = load_checkpoint<T>(r.cfg.cli.at("checkpoint"));
  r.cfg.model = m.config();
  return m;
}

template <class T>
int eval_cmd(Run& r) {
  Model<T> model = load_model<T>(r);
  echo_config(r);
  const Dataset data = load_data(r.cfg.cli.at("data"), model.config().max_seq_len);
  const auto rep = evaluate(model, data);
  write_file(r.out / "metrics.csv", EvalReport::csv_header() + "\n" + rep.csv_row() + "\n");
  std::cout << rep.key_values() << "\n";
  return 0;
}

template <class T>
int build_cache_cmd(Run& r) {
  Model<T> model = load_model<T>(r);
  if (!is_lime(model.kind())) throw UsageError("build-cache needs a LIME checkpoint, got " + model_kind_name(model.kind()));
  echo_config(r);
  const Dataset data = load_data(r.cfg.cli.at("data"), model.config().max_seq_len);
  check_compatible(model, data.catalog, context_width(data));
  std::vector<std::uint64_t> ids;
  std::vector<ItemFeatures> feats;
  for (const auto& [id, f] : data.catalog.items()) {
    ids.push_back(id);
    feats.push_back(f);
  }
  Binder<T> b;
  const Tensor<T> emb = model.embed_items(b, feats).value();
  const auto cache = build_cache(model, std::span<const std::uint64_t>(ids), emb);
  write_cache(cache, (r.out / "cache.bin").string());
  std::cout << "cached " << cache.size() << " items, fingerprint " << cache.fingerprint() << "\n";
  return 0;
}

template <class T>
int score_cmd(Run& r) {
  Model<T> model = load_model<T>(r);
  const bool lime_model = is_lime(model.kind());
  if (lime_model && !r.cfg.cli.contains("cache")) throw UsageError("score with a LIME checkpoint needs --cache");
  if (!lime_model && r.cfg.cli.contains("cache")) throw UsageError("--cache only applies to LIME checkpoints");
  echo_config(r);
  const Dataset data = load_data(r.cfg.cli.at("data"), model.config().max_seq_len);
  check_compatible(model, data.catalog, context_width(data));
  std::optional<QKCache<T>> cache;
  if (lime_model) {
    cache = read_cache<T>(r.cfg.cli.at("cache"));
    cache->check_fresh(model_fingerprint(model));
    std::vector<std::uint64_t> all;
    for (const auto& s : data.sessions) all.insert(all.end(), s.items.begin(), s.items.end());
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    cache->lookup(all);  // throws listing every missing id
  }
  std::string out = "user_id,item_id,score\n";
  for (const auto& s : data.sessions) {
    const Session* one = &s;
    Binder<T> b;
    auto in = session_inputs(b, model, data.catalog, std::span<const Session* const>(&one, 1));
    const auto st = compute_user_state(model, in.history[0].value(), in.context[0].value());
    const Tensor<T> scores = lime_model ? score_with_cache(model, st, *cache, std::span(s.items), in.candidates[0].value())
                                        : score_candidates(model, st, in.candidates[0].value());
    char buf[64];
    for (std::size_t i = 0; i < s.items.size(); ++i) {
      std::snprintf(buf, sizeof buf, ",%.9g\n", double(scores[i]));
      out += std::to_string(s.user_id) + "," + std::to_string(s.items[i]) + buf;
    }
  }
  write_file(r.out / "scores.csv", out);
  std::cout << "scored " << data.example_count() << " candidates in " << data.sessions.size() << " sessions\n";
  return 0;
}

template <class T>
int bench_cmd(Run& r, bool model_flag) {
  if (r.cfg.sweep.grid.empty()) throw UsageError("bench needs a grid (--grid A..B or sweep.grid)");
  if (model_flag) r.cfg.sweep.models = {r.cfg.model.kind};
  r.cfg.sweep.base = r.cfg.model;
  echo_config(r);
  const auto rows = run_sweep<T>(r.cfg.sweep, [](const BenchRow& row) {
    std::cout << row.model << " " << row.axis << "=" << row.axis_value << " ";
    if (row.skipped())
      std::cout << "skipped: " << row.skipped_reason << "\n";
    else
      std::cout << row.median_ms << " ms\n";
  });
  write_file(r.out / "bench.csv", bench_csv(rows));
  if (std::any_of(rows.begin(), rows.end(), [](const BenchRow& x) { return !x.skipped(); }))
    write_file(r.out / "bench.svg", bench_svg(rows, "median latency vs " + axis_name(r.cfg.sweep.axis)));
  return 0;
}

template <class T>
std::vector<RankingRequest<T>> analysis_requests(const Run& r, const Model<T>& model) {
  std::vector<RankingRequest<T>> reqs;
  const auto& a = r.cfg.analysis;
  if (r.cfg.cli.contains("data")) {
    const Dataset data = load_data(r.cfg.cli.at("data"), model.config().max_seq_len);
    check_compatible(model, data.catalog, context_width(data));
    for (std::size_t i = 0; i < data.sessions.size() && reqs.size() < a.requests; ++i) {
      if (data.sessions[i].history.empty()) continue;
      const Session* one = &data.sessions[i];
      Binder<T> b;
      auto in = session_inputs(b, model, data.catalog, std::span<const Session* const>(&one, 1));
      reqs.push_back({in.history[0].value(), in.context[0].value(), in.candidates[0].value(), {}, i});
    }
    if (reqs.empty()) throw std::runtime_error("no session with history in " + r.cfg.cli.at("data").get<std::string>());
    return reqs;
  }
  const auto& c = model.config();
  if (a.history > c.max_seq_len)
    throw UsageError("analysis.history " + std::to_string(a.history) + " exceeds the model's max_seq_len " +
                     std::to_string(c.max_seq_len));
  std::mt19937_64 rng(r.cfg.seed);
  for (std::size_t i = 0; i < a.requests; ++i)
    reqs.push_back({randn<T>({a.history, c.d}, rng), randn<T>({1, c.context_dim}, rng),
                    randn<T>({a.candidates, c.d}, rng), {}, i});
  return reqs;
}

template <class T>
int analyze_cmd(Run& r) {
  Model<T> model = load_model<T>(r);
  std::optional<Model<T>> skyline;
  if (r.cfg.cli.contains("skyline")) {
    if (model.kind() != ModelKind::LimeMha) throw UsageError("--skyline pairs with a lime-mha checkpoint");
    skyline.emplace(load_checkpoint<T>(r.cfg.cli.at("skyline")));
    if (skyline->kind() != ModelKind::MhaSkyline) throw UsageError("--skyline must be a mha-sky checkpoint");
  }
  echo_config(r);
  const auto reqs = analysis_requests(r, model);
  std::vector<SpectrumReport> reports = is_lime(model.kind())
                                            ? link_spectra<T>(model, reqs)
                                            : attention_spectra<T>(model, reqs, r.cfg.analysis.rank);
  json summary = {{"model", model_kind_name(model.kind())}, {"requests", reqs.size()}, {"spectra", json::array()}};
  for (const auto& rep : reports) {
    summary["spectra"].push_back({{"label", rep.label},
                                  {"matrices", rep.matrices},
                                  {"rank", rep.rank},
                                  {"captured_mass", rep.captured_mass},
                                  {"min_max_ratio", condition_ratio(rep)},
                                  {"warnings", rep.warnings}});
    std::cout << rep.label << ": top-" << rep.rank << " mass " << rep.captured_mass << "\n";
    for (const auto& w : rep.warnings) std::cout << "warning: " << rep.label << ": " << w << "\n";
  }
  if (skyline) {
    const auto dec = decomposition_residual<T>(model, *skyline, reqs);
    json curve = json::array();
    for (const auto& [rank, res] : dec.rank_curve) curve.push_back({{"rank", rank}, {"residual", res}});
    summary["decomposition"] = {{"links", dec.links}, {"mean_residual", dec.mean_residual}, {"residuals", dec.residuals},
                                {"truncated_svd_curve", curve}};
    std::cout << "decomposition residual (mean over requests): " << dec.mean_residual << "\n";
  }
  write_file(r.out / "spectrum.csv", spectrum_csv(reports));
  write_file(r.out / "spectrum.svg", spectrum_svg(reports));
  write_file(r.out / "summary.json", summary.dump(2) + "\n");
  return 0;
}

template <class T>
int dispatch(Run& r, const Args& a) {
  const std::string& c = a.command;
  if (c == "gen-data") return gen_data(r);
  if (c == "train") return train_cmd<T>(r);
  if (c == "eval") return eval_cmd<T>(r);
  if (c == "build-cache") return build_cache_cmd<T>(r);
  if (c == "score") return score_cmd<T>(r);
  if (c == "bench") return bench_cmd<T>(r, !a.model.empty());
  if (c == "analyze-svd") return analyze_cmd<T>(r);
  throw UsageError("unknown subcommand " + c);
}

std::string one_line(std::string s) {
  for (char& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LIME ranking models: data, training, cached serving, latency sweeps, spectral analysis"};
  app.require_subcommand(1);
  Args a;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", a.config, "JSON run config")->check(CLI::ExistingFile);
    sub->add_option("--out", a.out, "output directory")->required();
    sub->add_option("--seed", a.seed, "seed for every random choice (overrides the config)");
    sub->add_option("--precision", a.precision, "32 or 64 bit arithmetic")->check(CLI::IsMember({32, 64}));
  };
  auto* gen = app.add_subcommand("gen-data", "write synthetic train.csv and test.csv");
  auto* trn = app.add_subcommand("train", "train a model and write model.ckpt");
  auto* evl = app.add_subcommand("eval", "NE, AUC and log loss of a checkpoint on a CSV");
  auto* bld = app.add_subcommand("build-cache", "precompute item-side attention rows for a LIME checkpoint");
  auto* scr = app.add_subcommand("score", "score every session of a CSV with a checkpoint");
  auto* bch = app.add_subcommand("bench", "latency sweep over candidates, history length or qk width");
  auto* svd = app.add_subcommand("analyze-svd", "singular value spectra of attention matrices or links");
  for (auto* s : {gen, trn, evl, bld, scr, bch, svd}) common(s);
  const std::string kinds = "ttsn, lime-mha, lime-xor, mha-sky, hstu-sky";
  trn->add_option("--model", a.model, kinds);
  trn->add_option("--data", a.data, "training CSV")->required()->check(CLI::ExistingFile);
  trn->add_option("--test", a.test, "evaluation CSV; writes metrics.csv")->check(CLI::ExistingFile);
  for (auto* s : {evl, bld, scr, svd})
    s->add_option("--checkpoint", a.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  for (auto* s : {evl, bld, scr}) s->add_option("--data", a.data, "CSV input")->required()->check(CLI::ExistingFile);
  scr->add_option("--cache", a.cache, "QK cache from build-cache")->check(CLI::ExistingFile);
  bch->add_option("--model", a.model, "benchmark only this model (" + kinds + ")");
  bch->add_option("--axis", a.axis, "candidates, history or qk-dim");
  bch->add_option("--grid", a.grid, "A..B (powers of two) or a,b,c");
  svd->add_option("--data", a.data, "CSV whose sessions become requests; random requests otherwise")
      ->check(CLI::ExistingFile);
  svd->add_option("--skyline", a.skyline, "mha-sky checkpoint for the decomposition residual")->check(CLI::ExistingFile);

  CLI::App* active = &app;
  try {
    app.parse(argc, argv);
    active = app.get_subcommands().front();
    a.command = active->get_name();
    Run r = resolve(a);
    return r.cfg.precision == 64 ? dispatch<double>(r, a) : dispatch<float>(r, a);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    for (auto* s : app.get_subcommands()) active = s;
    std::cerr << "usage error: " << one_line(e.what()) << "\n\n" << active->help();
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << one_line(e.what()) << "\n\n" << active->help();
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << one_line(e.what()) << "\n\n" << active->help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << one_line(e.what()) << "\n";
    return 1;
  }
}
