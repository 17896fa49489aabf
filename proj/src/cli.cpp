#include "paco/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "paco/errors.hpp"
#include "paco/eval.hpp"
#include "paco/io_util.hpp"
#include "paco/sampler.hpp"

namespace fs = std::filesystem;

namespace paco::cli {

namespace {

// One process owns one output directory.
class DirLock {
 public:
  explicit DirLock(const fs::path &dir) : path_(dir / "lock") {
    std::error_code ec;
    fs::create_directories(dir, ec);
    FILE *f = fopen(path_.c_str(), "wx");
    if (!f)
      throw ConfigError("output directory is locked (remove " + path_.string() +
                        " if no other run owns it)");
    fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock &) = delete;
  DirLock &operator=(const DirLock &) = delete;

 private:
  fs::path path_;
};

fs::path out_path(const RunConfig &cfg, const char *name) {
  return fs::path(cfg.out_dir) / name;
}

std::pair<uint32_t, uint32_t> resolve_pair(const RatingsCorpus &corpus,
                                           const std::string &spec) {
  size_t colon = spec.find(':');
  if (colon == std::string::npos)
    throw ConfigError("pair must be user:item, got '" + spec + "'");
  std::string user = spec.substr(0, colon);
  std::string item = spec.substr(colon + 1);
  auto uit = corpus.user_index.find(user);
  if (uit == corpus.user_index.end())
    throw DataError("unknown user id '" + user + "' (corpus has " +
                    std::to_string(corpus.n_users) + " users)");
  auto iit = corpus.item_index.find(item);
  if (iit == corpus.item_index.end())
    throw DataError("unknown item id '" + item + "' (corpus has " +
                    std::to_string(corpus.n_items) + " items)");
  return {uit->second, iit->second};
}

void require_file(const fs::path &p, const char *hint) {
  if (!fs::exists(p))
    throw DataError(p.string() + " not found; run `paco " + hint + "` first");
}

constexpr char kCheckpointMagic[9] = "PACOCKP1";

}  // namespace

void cmd_prepare(const RunConfig &cfg) {
  cfg.validate();
  DirLock lock(cfg.out_dir);

  LoadStats load_stats;
  auto observations = load_observations(cfg.input, cfg.format, &load_stats);
  if (observations.empty()) throw DataError("no parseable observations in " + cfg.input);

  auto stopwords = cfg.stopword_file.empty() ? default_stopwords()
                                             : load_stopwords(cfg.stopword_file);
  Vocabulary vocab =
      build_vocabulary(observations, cfg.min_word_len, cfg.min_freq, stopwords);

  VectorizeStats vstats;
  RatingsCorpus corpus = vectorize(observations, vocab, cfg.rating_scale, &vstats);

  SplitStats sstats;
  auto [train_c, test_c] =
      split_train_test(corpus, cfg.test_fraction, cfg.hyper.seed, &sstats);
  double global_mean = center_ratings(train_c, test_c);

  save_corpus(train_c, out_path(cfg, "train.corpus").string());
  save_corpus(test_c, out_path(cfg, "test.corpus").string());

  uint64_t train_tokens = 0, test_tokens = 0;
  for (uint32_t c : train_c.word_counts) train_tokens += c;
  for (uint32_t c : test_c.word_counts) test_tokens += c;

  std::ofstream mf(out_path(cfg, "manifest.txt"));
  char buf[128];
  mf << "input=" << cfg.input << "\n";
  mf << "format=" << (cfg.format == InputFormat::tsv ? "tsv" : "jsonl") << "\n";
  mf << "records_parsed=" << load_stats.parsed << "\n";
  mf << "records_malformed=" << load_stats.malformed << "\n";
  mf << "duplicates_dropped=" << vstats.duplicates_dropped << "\n";
  mf << "users=" << corpus.n_users << "\n";
  mf << "items=" << corpus.n_items << "\n";
  mf << "vocab=" << vocab.size() << "\n";
  mf << "train_observations=" << train_c.reviews.size() << "\n";
  mf << "test_observations=" << test_c.reviews.size() << "\n";
  mf << "moved_for_coverage=" << sstats.moved_for_coverage << "\n";
  mf << "train_tokens=" << train_tokens << "\n";
  mf << "test_tokens=" << test_tokens << "\n";
  snprintf(buf, sizeof(buf), "avg_review_length=%.17g\n",
           train_c.reviews.empty()
               ? 0.0
               : static_cast<double>(train_tokens) / train_c.reviews.size());
  mf << buf;
  snprintf(buf, sizeof(buf), "global_mean=%.17g\n", global_mean);
  mf << buf;
  mf << "seed=" << cfg.hyper.seed << "\n";
  snprintf(buf, sizeof(buf), "test_fraction=%.17g\n", cfg.test_fraction);
  mf << buf;
  mf << "min_word_len=" << cfg.min_word_len << "\n";
  mf << "min_freq=" << cfg.min_freq << "\n";
  if (!mf) throw DataError("failed writing manifest");
  fprintf(stderr, "prepare: %zu users, %zu items, %zu words, %zu train / %zu test\n",
          corpus.n_users, corpus.n_items, vocab.size(), train_c.reviews.size(),
          test_c.reviews.size());
}

void cmd_train(const RunConfig &cfg) {
  cfg.validate();
  DirLock lock(cfg.out_dir);
  require_file(out_path(cfg, "train.corpus"), "prepare");
  require_file(out_path(cfg, "test.corpus"), "prepare");

  RatingsCorpus train_c = load_corpus(out_path(cfg, "train.corpus").string());
  RatingsCorpus test_c = load_corpus(out_path(cfg, "test.corpus").string());

  std::vector<std::pair<uint32_t, uint32_t>> probes;
  probes.reserve(test_c.reviews.size());
  for (const auto &rv : test_c.reviews) probes.emplace_back(rv.user, rv.item);

  TrainOptions opts;
  opts.gibbs.threads = cfg.threads;
  opts.probe_corpus = &test_c;
  for (const auto &p : cfg.inspect_pairs)
    opts.report_pairs.push_back(resolve_pair(train_c, p));

  const uint64_t cfg_hash = cfg.hash();
  const fs::path ckpt_path = out_path(cfg, "checkpoint.bin");
  const fs::path log_path = out_path(cfg, "metrics.log");

  Trainer trainer(train_c, cfg.hyper, probes, opts);
  uint64_t log_bytes = 0;
  if (fs::exists(ckpt_path)) {
    BinaryReader r(ckpt_path.string());
    r.expect_magic(kCheckpointMagic);
    uint32_t ver = r.u32();
    if (ver != 1) throw DataError("unsupported checkpoint version");
    uint64_t h = r.u64();
    if (h != cfg_hash)
      throw ConfigError("checkpoint was produced by a different config; refusing "
                        "to resume (delete " + ckpt_path.string() + " to retrain)");
    log_bytes = r.u64();
    trainer.restore(r);
    fprintf(stderr, "train: resuming at iteration %llu\n",
            static_cast<unsigned long long>(trainer.iteration()));
  }

  // Truncate the metric log to the checkpointed prefix so a resumed run
  // appends exactly the rows the uninterrupted run would have written.
  if (fs::exists(log_path)) {
    fs::resize_file(log_path, log_bytes);
  } else {
    log_bytes = 0;
  }
  std::ofstream log(log_path, std::ios::app);
  if (trainer.iteration() == 0 && log_bytes == 0)
    log << "# iter\ttrain_rmse\ttest_rmse\tlog_ppx\tjoint_nll\twall_s\n";

  auto save_checkpoint = [&](const Trainer &t) {
    log.flush();
    uint64_t bytes = fs::exists(log_path) ? fs::file_size(log_path) : 0;
    fs::path tmp = ckpt_path;
    tmp += ".tmp";
    {
      BinaryWriter w(tmp.string());
      w.magic(kCheckpointMagic);
      w.u32(1);
      w.u64(cfg_hash);
      w.u64(bytes);
      t.save(w);
      w.close();
    }
    fs::rename(tmp, ckpt_path);
  };

  auto start = std::chrono::steady_clock::now();
  while (!trainer.done()) {
    if (cfg.stop_after && trainer.iteration() >= cfg.stop_after) {
      save_checkpoint(trainer);
      fprintf(stderr, "train: stopping at iteration %llu as requested; rerun to resume\n",
              static_cast<unsigned long long>(trainer.iteration()));
      return;
    }
    trainer.step();
    uint64_t it = trainer.iteration();  // iterations completed
    if ((it - 1) % cfg.metric_log_every == 0 || trainer.done()) {
      EvalReport er = evaluate_state(trainer.model(), test_c);
      double tr = train_rmse(trainer.model(), train_c);
      double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                  start).count();
      char buf[256];
      snprintf(buf, sizeof(buf), "%llu\t%.17g\t%.17g\t%.17g\t%.17g\t%.3f\n",
               static_cast<unsigned long long>(it - 1), tr, er.rmse, er.log_ppx,
               er.joint_nll, wall);
      log << buf;
    }
    if (cfg.checkpoint_interval && it % cfg.checkpoint_interval == 0 &&
        !trainer.done())
      save_checkpoint(trainer);
  }
  log.flush();

  serialize(trainer.model(), out_path(cfg, "model.bin").string());
  save_summary(trainer.summary(), out_path(cfg, "summary.bin").string());
  save_checkpoint(trainer);
  {
    std::ofstream rc(out_path(cfg, "config.resolved"));
    rc << cfg.canonical();
  }
  fprintf(stderr, "train: finished %llu iterations (%u samples averaged)\n",
          static_cast<unsigned long long>(trainer.iteration()),
          trainer.summary().n_samples_used);
}

void cmd_evaluate(const RunConfig &cfg, const std::string &baseline_path) {
  cfg.validate();
  DirLock lock(cfg.out_dir);
  require_file(out_path(cfg, "model.bin"), "train");
  require_file(out_path(cfg, "summary.bin"), "train");
  require_file(out_path(cfg, "test.corpus"), "prepare");
  require_file(out_path(cfg, "train.corpus"), "prepare");

  PacoModel model = deserialize(out_path(cfg, "model.bin").string());
  PosteriorSummary summary = load_summary(out_path(cfg, "summary.bin").string());
  RatingsCorpus test_c = load_corpus(out_path(cfg, "test.corpus").string());
  RatingsCorpus train_c = load_corpus(out_path(cfg, "train.corpus").string());

  if (!(model.vocab == test_c.vocab))
    throw DataError("model vocabulary does not match the test corpus; the model "
                    "was trained against a different prepare run");

  EvalReport report = evaluate(summary, test_c, model.sigma2);
  {
    std::ofstream t(out_path(cfg, "report.txt"));
    write_report_text(report, t);
  }
  {
    std::ofstream k(out_path(cfg, "report.kv"));
    write_report_kv(report, k);
  }
  if (!baseline_path.empty()) {
    BaselinePredictions base = load_baseline_predictions(baseline_path, test_c);
    ColdStartTable table = cold_start_buckets(summary, base, train_c, test_c);
    std::ofstream c(out_path(cfg, "coldstart.txt"));
    write_cold_start(table, c);
  }
  fprintf(stderr, "evaluate: rmse %.4f, log-ppx %.4f, joint nll %.4f\n", report.rmse,
          report.log_ppx, report.joint_nll);
}

void cmd_inspect(const RunConfig &cfg, const InspectOptions &opts) {
  cfg.validate();
  DirLock lock(cfg.out_dir);
  require_file(out_path(cfg, "model.bin"), "train");

  PacoModel model = deserialize(out_path(cfg, "model.bin").string());
  RatingsCorpus train_c;
  const RatingsCorpus *train_ptr = nullptr;
  if (fs::exists(out_path(cfg, "train.corpus"))) {
    train_c = load_corpus(out_path(cfg, "train.corpus").string());
    train_ptr = &train_c;
  }

  if (opts.stencil >= 0 &&
      static_cast<uint32_t>(opts.stencil) >= model.hyper.text_stencils)
    throw DataError("stencil " + std::to_string(opts.stencil) +
                    " has no language models (text stencils: 0.." +
                    std::to_string(model.hyper.text_stencils) + ")");

  TopWordsReport rep = top_words_report(model, cfg.top_k, train_ptr);
  {
    std::ofstream o(out_path(cfg, "report_blocks.txt"));
    if (opts.stencil >= 0) {
      TopWordsReport filtered;
      for (const auto &b : rep.blocks)
        if (b.stencil == static_cast<uint32_t>(opts.stencil))
          filtered.blocks.push_back(b);
      write_block_report(filtered, model, o);
    } else {
      write_block_report(rep, model, o);
    }
  }
  {
    std::ofstream o(out_path(cfg, "report_item_clusters.txt"));
    write_item_cluster_report(rep, model, o);
  }
  {
    std::ofstream o(out_path(cfg, "report_items.txt"));
    if (!opts.item.empty()) {
      if (!train_ptr)
        throw DataError("item lookup by id needs train.corpus in the output dir");
      auto it = train_ptr->item_index.find(opts.item);
      if (it == train_ptr->item_index.end())
        throw DataError("unknown item id '" + opts.item + "' (corpus has " +
                        std::to_string(train_ptr->n_items) + " items)");
      o << "item " << it->second << " (" << opts.item << ")\n  ";
      const auto &ws = rep.item_words[it->second];
      for (size_t i = 0; i < ws.size(); ++i)
        o << (i ? ", " : "") << model.vocab.words[ws[i].word];
      o << "\n";
    } else {
      write_item_report(rep, model, 50, o);
    }
  }
  if (!opts.pairs.empty()) {
    require_file(out_path(cfg, "summary.bin"), "train");
    PosteriorSummary summary = load_summary(out_path(cfg, "summary.bin").string());
    if (!train_ptr) throw DataError("pair lookup needs train.corpus in the output dir");
    std::ofstream o(out_path(cfg, "report_pairs.txt"));
    for (const auto &spec : opts.pairs) {
      auto [u, m] = resolve_pair(*train_ptr, spec);
      auto ws = top_pair_words(summary, model.vocab, u, m, cfg.top_k);
      o << "pair " << spec << " predicted words:\n  ";
      for (size_t i = 0; i < ws.size(); ++i)
        o << (i ? ", " : "") << model.vocab.words[ws[i].word];
      o << "\n";
    }
  }
  fprintf(stderr, "inspect: reports written to %s\n", cfg.out_dir.c_str());
}

int run(int argc, const char *const *argv) {
  CLI::App app{"Poisson additive co-clustering of ratings and review text"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  int threads_override = -1;
  long long seed_override = -1;
  std::string baseline_path;
  InspectOptions inspect_opts;

  auto add_common = [&](CLI::App *sub) {
    sub->add_option("--config", config_path, "config file (key=value lines)")
        ->required();
    sub->add_option("--set", overrides, "override a config key (key=value)");
    sub->add_option("--threads", threads_override, "thread count override");
    sub->add_option("--seed", seed_override, "seed override");
  };

  CLI::App *prep = app.add_subcommand("prepare", "build corpus caches and the split");
  add_common(prep);
  CLI::App *tr = app.add_subcommand("train", "run the Gibbs sampler");
  add_common(tr);
  CLI::App *ev = app.add_subcommand("evaluate", "held-out metrics from a trained model");
  add_common(ev);
  ev->add_option("--baseline", baseline_path,
                 "user<TAB>item<TAB>prediction file for cold-start deltas");
  CLI::App *in = app.add_subcommand("inspect", "interpretability reports");
  add_common(in);
  in->add_option("--stencil", inspect_opts.stencil, "restrict block report to one stencil");
  in->add_option("--item", inspect_opts.item, "single item id to report");
  in->add_option("--pair", inspect_opts.pairs, "user:item pair(s) to report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    RunConfig cfg = parse_config_file(config_path);
    for (const auto &ov : overrides) apply_override(cfg, ov);
    if (threads_override > 0) cfg.threads = threads_override;
    if (seed_override >= 0) cfg.hyper.seed = static_cast<uint64_t>(seed_override);

    if (prep->parsed()) cmd_prepare(cfg);
    else if (tr->parsed()) cmd_train(cfg);
    else if (ev->parsed()) cmd_evaluate(cfg, baseline_path);
    else if (in->parsed()) cmd_inspect(cfg, inspect_opts);
    return kExitOk;
  } catch (const ConfigError &e) {
    fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const DataError &e) {
    fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const InternalError &e) {
    fprintf(stderr, "internal error: %s\n", e.what());
    return kExitInternal;
  } catch (const std::exception &e) {
    fprintf(stderr, "error: %s\n", e.what());
    return kExitInternal;
  }
}

int run(const std::vector<std::string> &args) {
  std::vector<const char *> argv;
  argv.push_back("paco");
  for (const auto &a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace paco::cli
