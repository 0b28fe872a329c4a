// SPDX-License-Identifier: Apache-2.0
// rr: command-line entry point. Data goes to files or stdout, logs to stderr.
// Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.

#include <CLI11.hpp>

#include <cmath>
#include <iostream>
#include <set>

#include "rr/synthbench.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3;

int exit_code(rr::Errc c) {
  switch (c) {
    case rr::Errc::NonFiniteLoss:
    case rr::Errc::DivergenceDetected:
    case rr::Errc::ZeroVector:
    case rr::Errc::SpecInfeasible:
    case rr::Errc::NonFiniteOutput:
      return kExitNumeric;
    case rr::Errc::InvalidArgument:
      return kExitUsage;
    default:
      return kExitData;
  }
}

void write_or_print(const std::optional<fs::path>& out, const std::string& text) {
  if (out) {
    if (out->has_parent_path()) fs::create_directories(out->parent_path());
    rr::detail::write_text_atomic(*out, text);
  } else {
    std::cout << text << std::flush;
  }
}

// Queries may come without a sidecar; rows are then named by index.
rr::EmbeddingStore load_queries(const fs::path& path) {
  if (fs::exists(rr::meta_path(path))) return rr::load_store(path);
  auto f = rr::read_remb(path);
  rr::check_unit_rows(f.data, f.dim, path.string());
  return rr::EmbeddingStore(f.dim, std::move(f.data));
}

// --- build-store -------------------------------------------------------------

struct BuildStoreArgs {
  fs::path input, out;
  std::optional<std::string> encoder;
};

void build_store(const BuildStoreArgs& a) {
  std::vector<float> rows;
  std::vector<rr::RowMeta> meta;
  std::size_t dim = 0;
  rr::detail::for_each_jsonl(rr::detail::read_text(a.input), a.input.string(),
                             [&](const nlohmann::json& j, std::size_t lineno) {
                               const auto where = a.input.string() + ":" + std::to_string(lineno);
                               auto v = j.at("vector").get<std::vector<double>>();
                               if (meta.empty()) dim = v.size();
                               if (v.size() != dim || dim == 0)
                                 rr::fail(rr::Errc::DimMismatch, where + ": vector length " + std::to_string(v.size()));
                               const auto u = rr::normalize(std::span<const double>(v));
                               rows.insert(rows.end(), u.begin(), u.end());
                               const std::string id = j.contains("id") ? j["id"].get<std::string>()
                                                                       : std::to_string(meta.size());
                               meta.push_back({id, rr::detail::opt_string(j, "label", where),
                                               rr::detail::opt_string(j, "caption", where)});
                             });
  rr::require(!meta.empty(), rr::Errc::EmptyInput, a.input.string() + ": no records");
  rr::save_store(rr::EmbeddingStore(dim, std::move(rows), std::move(meta), a.encoder), a.out);
  rr::log(rr::LogLevel::Info, "wrote " + a.out.string());
}

// --- mine --------------------------------------------------------------------

struct MineArgs {
  fs::path db, pairs;
  std::optional<fs::path> out;
};

void mine(const MineArgs& a) {
  const auto db = rr::load_store(a.db);
  const auto pairs = rr::load_generated_set(a.pairs);
  write_or_print(a.out, rr::encode_assignment(rr::mine_reflective(pairs, db)));
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  fs::path db, pairs, out;
  std::optional<fs::path> assign;
  std::string mode = "real", optimizer = "adam";
  rr::LossConfig loss;
  rr::TrainerConfig trainer;
  std::size_t hidden = 0;
};

void train(TrainArgs a) {
  const auto db = rr::load_store(a.db);
  const auto pairs = rr::load_generated_set(a.pairs);
  a.loss.mode = rr::parse_loss_mode(a.mode);
  a.trainer.optimizer = rr::parse_optimizer(a.optimizer);
  a.trainer.out_dir = a.out;
  std::optional<rr::ReflectiveAssignment> assignment;
  if (a.assign) assignment = rr::load_assignment(*a.assign);
  const auto head = rr::init_head(db.dim(), a.hidden ? a.hidden : db.dim(), a.trainer.seed);
  auto report = rr::train(db, pairs, assignment ? &*assignment : nullptr, head, a.loss, a.trainer);
  rr::log(rr::LogLevel::Info, "final mean loss " + std::to_string(report.epoch_losses.back()));
}

// --- retrieve ----------------------------------------------------------------

struct RetrieveArgs {
  fs::path db, queries;
  std::string variant = "zero";
  std::optional<fs::path> checkpoint, out;
  std::size_t k = 1;
};

void retrieve(const RetrieveArgs& a) {
  const auto db = rr::load_store(a.db);
  const auto queries = load_queries(a.queries);
  const rr::Retriever retriever(db, rr::RetrieverVariant{rr::parse_variant(a.variant), a.checkpoint});
  std::vector<rr::ManifestPrompt> prompts;
  std::vector<rr::RetrievalResult> results;
  for (std::size_t i = 0; i < queries.count(); ++i) {
    prompts.push_back({queries.meta(i).id, queries.meta(i).caption});
    results.push_back(retriever.retrieve(queries.row(i), a.k));
  }
  write_or_print(a.out, rr::encode_manifest(rr::build_manifest(prompts, results, db, a.k)));
}

// --- eval --------------------------------------------------------------------

struct EvalArgs {
  fs::path db, heldout;
  std::optional<fs::path> normal, real, out, csv;
  std::uint64_t seed = 0;
};

struct LoggedRun {
  std::vector<std::size_t> epochs;
  std::vector<fs::path> checkpoints;
  std::vector<double> losses;
};

LoggedRun read_run(const fs::path& dir) {
  LoggedRun run;
  const auto log_path = dir / rr::kTrainLogName;
  rr::detail::for_each_jsonl(rr::detail::read_text(log_path), log_path.string(),
                             [&](const nlohmann::json& j, std::size_t) {
                               run.losses.push_back(j.at("mean_loss").get<double>());
                               const auto& c = j.at("checkpoint");
                               if (c.is_null()) return;
                               run.epochs.push_back(j.at("epoch").get<std::size_t>());
                               run.checkpoints.push_back(dir / c.get<std::string>());
                             });
  return run;
}

void eval(const EvalArgs& a) {
  const auto db = rr::load_store(a.db);
  const auto heldout = rr::load_generated_set(a.heldout);

  rr::EvalReport report;
  report.seed = a.seed;
  std::size_t hard = 0;
  for (const auto& p : heldout.prompts)
    hard += db.meta(rr::top_k(db, p.query, 1).top().row).label == rr::kLabelKnown;
  report.hard_fraction = heldout.empty() ? 0.0 : static_cast<double>(hard) / static_cast<double>(heldout.size());

  std::set<std::size_t> all_epochs;
  std::vector<rr::VariantCurve> trained;
  for (auto [kind, dir] : {std::pair{rr::VariantKind::normal, a.normal}, std::pair{rr::VariantKind::real, a.real}}) {
    if (!dir) continue;
    const auto run = read_run(*dir);
    rr::VariantCurve curve{std::string(rr::to_string(kind)), run.epochs, {}};
    for (const auto& ckpt : run.checkpoints)
      curve.metrics.push_back(rr::evaluate(rr::Retriever(db, rr::RetrieverVariant{kind, ckpt}), heldout));
    all_epochs.insert(run.epochs.begin(), run.epochs.end());
    (kind == rr::VariantKind::normal ? report.normal_losses : report.real_losses) = run.losses;
    trained.push_back(std::move(curve));
  }
  if (all_epochs.empty()) all_epochs.insert(0);
  const auto zero = rr::evaluate(rr::Retriever(db, rr::RetrieverVariant{}), heldout);
  report.curves.push_back({"zero", {all_epochs.begin(), all_epochs.end()}, std::vector<rr::Metrics>(all_epochs.size(), zero)});
  for (auto& c : trained) report.curves.push_back(std::move(c));

  write_or_print(a.out, rr::to_json(report).dump(2) + "\n");
  if (a.csv) write_or_print(a.csv, rr::to_csv(report));
}

// --- synth -------------------------------------------------------------------

void synth(const rr::SynthSpec& spec, const fs::path& out) {
  const auto data = rr::synth_generate(spec);
  fs::create_directories(out);
  rr::save_store(data.db, out / "db.emb");
  rr::save_generated_set(data.pairs, out / "pairs");
  rr::save_generated_set(data.heldout, out / "heldout");
  rr::log(rr::LogLevel::Info, "hard fraction " + std::to_string(data.hard_fraction) + " after " +
                                  std::to_string(data.attempts) + " draw(s)");
}

// --- inspect -----------------------------------------------------------------

ordered_json inspect(const fs::path& path) {
  const auto bytes = rr::detail::read_file(path);
  ordered_json j;
  j["path"] = path.string();
  j["bytes"] = bytes.size();
  const std::string magic(bytes.begin(), bytes.begin() + std::min<std::size_t>(4, bytes.size()));
  if (magic == "REMB") {
    const auto f = rr::decode_remb(bytes, path.string());
    j["format"] = "REMB";
    j["dim"] = f.dim;
    j["count"] = f.count;
    j["reserved"] = f.reserved;
    double lo = INFINITY, hi = 0.0;
    for (std::size_t r = 0; r < f.count; ++r) {
      const auto n = std::sqrt(rr::dot64(std::span(f.data).subspan(r * f.dim, f.dim),
                                         std::span(f.data).subspan(r * f.dim, f.dim)));
      lo = std::min(lo, n);
      hi = std::max(hi, n);
    }
    if (f.count) {
      j["min_norm"] = lo;
      j["max_norm"] = hi;
    }
    if (fs::exists(rr::meta_path(path))) {
      const auto m = rr::decode_meta(rr::detail::read_text(rr::meta_path(path)), rr::meta_path(path).string());
      j["meta_records"] = m.rows.size();
      j["encoder"] = m.encoder ? ordered_json(*m.encoder) : ordered_json(nullptr);
      std::map<std::string, std::size_t> labels;
      for (const auto& r : m.rows)
        if (r.label) ++labels[*r.label];
      if (!labels.empty()) j["labels"] = labels;
    }
  } else if (magic == "RRPH") {
    const auto h = rr::decode_head(bytes, path.string());
    j["format"] = "RRPH";
    j["d"] = h.d;
    j["h"] = h.h;
    j["residual"] = h.residual;
    static const char* names[] = {"W1", "b1", "W2", "b2"};
    ordered_json norms;
    const auto ts = rr::tensors(h);
    for (std::size_t t = 0; t < ts.size(); ++t) {
      double s = 0.0;
      for (double x : ts[t]) s += x * x;
      norms[names[t]] = std::sqrt(s);
    }
    j["frobenius_norms"] = norms;
  } else {
    std::size_t records = 0;
    rr::detail::for_each_jsonl(std::string(bytes.begin(), bytes.end()), path.string(),
                               [&](const nlohmann::json&, std::size_t) { ++records; });
    j["format"] = "jsonl";
    j["records"] = records;
  }
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rr: reflective retrieval toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  unsigned threads = 0;
  std::string log_level = "warn";
  app.add_option("--threads", threads, "worker thread cap (0: RR_THREADS, else hardware concurrency)");
  app.add_option("--log_level,--log-level", log_level, "error|warn|info|debug")
      ->check(CLI::IsMember({"error", "warn", "info", "debug"}));

  // build-store
  BuildStoreArgs bs;
  auto* c_build = app.add_subcommand("build-store", "JSONL of {id, vector, label?, caption?} -> REMB store + sidecar");
  c_build->add_option("--input", bs.input, "input JSONL")->required();
  c_build->add_option("--out", bs.out, "output .emb path (sidecar written next to it)")->required();
  c_build->add_option("--encoder", bs.encoder, "encoder identifier recorded in the sidecar");

  // mine
  MineArgs mn;
  auto* c_mine = app.add_subcommand("mine", "mine one reflective negative per prompt");
  c_mine->add_option("--db", mn.db, "database store (.emb)")->required();
  c_mine->add_option("--pairs", mn.pairs, "generated set prefix")->required();
  c_mine->add_option("--out", mn.out, "assignment JSONL (default: stdout)");

  // train
  TrainArgs tr;
  std::string ckpt_list = "2,4,6,8,10";
  auto* c_train = app.add_subcommand("train", "train a projection head");
  c_train->add_option("--db", tr.db, "database store (.emb)")->required();
  c_train->add_option("--pairs", tr.pairs, "generated set prefix")->required();
  c_train->add_option("--assign", tr.assign, "reflective assignment JSONL (real mode)");
  c_train->add_option("--out", tr.out, "run directory for checkpoints and log")->required();
  c_train->add_option("--mode", tr.mode, "normal|real")->capture_default_str();
  c_train->add_option("--tau", tr.loss.tau, "temperature")->capture_default_str();
  c_train->add_option("--apply_tau_to_reflective,--apply-tau-to-reflective", tr.loss.apply_tau_to_reflective,
                      "divide the reflective logit by tau")
      ->capture_default_str();
  c_train->add_option("--epochs", tr.trainer.epochs)->capture_default_str();
  c_train->add_option("--batch_size,--batch-size", tr.trainer.batch_size)->capture_default_str();
  c_train->add_option("--learning_rate,--learning-rate", tr.trainer.learning_rate)->capture_default_str();
  c_train->add_option("--optimizer", tr.optimizer, "adam|sgd")->capture_default_str();
  c_train->add_option("--beta1", tr.trainer.beta1)->capture_default_str();
  c_train->add_option("--beta2", tr.trainer.beta2)->capture_default_str();
  c_train->add_option("--eps", tr.trainer.eps)->capture_default_str();
  c_train->add_option("--seed", tr.trainer.seed)->capture_default_str();
  c_train->add_option("--checkpoint_epochs,--checkpoint-epochs", ckpt_list, "comma-separated epochs")
      ->capture_default_str();
  c_train->add_flag("--remine_each_epoch,--remine-each-epoch", tr.trainer.remine_each_epoch,
                    "re-mine negatives against the current head every epoch");
  c_train->add_option("--hidden", tr.hidden, "hidden width (0: same as dim)")->capture_default_str();

  // retrieve
  RetrieveArgs rt;
  auto* c_ret = app.add_subcommand("retrieve", "top-k retrieval; writes a generation manifest");
  c_ret->add_option("--db", rt.db, "database store (.emb)")->required();
  c_ret->add_option("--queries", rt.queries, "query embeddings (.emb, sidecar optional)")->required();
  c_ret->add_option("--variant", rt.variant, "zero|normal|real")->capture_default_str();
  c_ret->add_option("--checkpoint", rt.checkpoint, "head checkpoint (normal, real)");
  c_ret->add_option("--k", rt.k)->capture_default_str();
  c_ret->add_option("--out", rt.out, "manifest path (default: stdout)");

  // eval
  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "evaluate zero and trained runs on held-out prompts");
  c_eval->add_option("--db", ev.db, "database store (.emb)")->required();
  c_eval->add_option("--heldout", ev.heldout, "held-out generated set prefix")->required();
  c_eval->add_option("--normal", ev.normal, "run directory of a normal-mode train");
  c_eval->add_option("--real", ev.real, "run directory of a real-mode train");
  c_eval->add_option("--seed", ev.seed, "seed recorded in the report")->capture_default_str();
  c_eval->add_option("--out", ev.out, "report JSON (default: stdout)");
  c_eval->add_option("--csv", ev.csv, "flat CSV copy of the report");

  // synth
  rr::SynthSpec spec;
  fs::path synth_out;
  auto* c_synth = app.add_subcommand("synth", "write a seeded synthetic benchmark (db, pairs, heldout)");
  c_synth->add_option("--out", synth_out, "output directory")->required();
  c_synth->add_option("--seed", spec.seed)->capture_default_str();
  c_synth->add_option("--d", spec.d)->capture_default_str();
  c_synth->add_option("--n_known,--n-known", spec.n_known)->capture_default_str();
  c_synth->add_option("--n_missing,--n-missing", spec.n_missing)->capture_default_str();
  c_synth->add_option("--n_distractor,--n-distractor", spec.n_distractor)->capture_default_str();
  c_synth->add_option("--cluster_spread,--cluster-spread", spec.cluster_spread)->capture_default_str();
  c_synth->add_option("--center_similarity,--center-similarity", spec.center_similarity)->capture_default_str();
  c_synth->add_option("--mixing", spec.text_offset.mixing, "text offset: random linear map strength")
      ->capture_default_str();
  c_synth->add_option("--gap", spec.text_offset.gap, "text offset: pull towards the known center")
      ->capture_default_str();
  c_synth->add_option("--noise", spec.text_offset.noise, "text offset: per-query noise")->capture_default_str();
  c_synth->add_option("--n_train_prompts,--n-train-prompts", spec.n_train_prompts)->capture_default_str();
  c_synth->add_option("--n_heldout_prompts,--n-heldout-prompts", spec.n_heldout_prompts)->capture_default_str();
  c_synth->add_option("--min_hard_fraction,--min-hard-fraction", spec.min_hard_fraction)->capture_default_str();

  // inspect
  fs::path inspect_path;
  auto* c_inspect = app.add_subcommand("inspect", "print headers and stats of an .emb, .rrph or .jsonl file as JSON");
  c_inspect->add_option("file", inspect_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "rr: " << e.what() << " (see 'rr --help')\n";
    return kExitUsage;
  }

  static const std::map<std::string, rr::LogLevel> levels{
      {"error", rr::LogLevel::Error}, {"warn", rr::LogLevel::Warn}, {"info", rr::LogLevel::Info},
      {"debug", rr::LogLevel::Debug}};
  rr::set_log_level(levels.at(log_level));
  if (!threads) threads = rr::threads_from_env();
  if (!threads) threads = std::max(1u, std::thread::hardware_concurrency());
  rr::set_max_threads(threads);

  try {
    if (c_build->parsed()) build_store(bs);
    if (c_mine->parsed()) mine(mn);
    if (c_train->parsed()) {
      tr.trainer.checkpoint_epochs.clear();
      std::stringstream ss(ckpt_list);
      for (std::string tok; std::getline(ss, tok, ',');) {
        std::size_t pos = 0;
        long v = -1;
        try {
          v = std::stol(tok, &pos);
        } catch (...) {
        }
        if (v < 1 || pos != tok.size()) {
          std::cerr << "rr: --checkpoint_epochs: '" << tok << "' is not a positive integer (see 'rr train --help')\n";
          return kExitUsage;
        }
        tr.trainer.checkpoint_epochs.push_back(static_cast<std::size_t>(v));
      }
      train(tr);
    }
    if (c_ret->parsed()) retrieve(rt);
    if (c_eval->parsed()) eval(ev);
    if (c_synth->parsed()) synth(spec, synth_out);
    if (c_inspect->parsed()) std::cout << inspect(inspect_path).dump(2) << "\n";
  } catch (const rr::Error& e) {
    std::cerr << "rr: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "rr: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}
