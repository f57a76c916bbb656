#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "selfcheck.hpp"
#include "tandem/checkpoint.hpp"
#include "tandem/config.hpp"
#include "tandem/kernels.hpp"
#include "tandem/metrics.hpp"
#include "tandem/speed.hpp"
#include "tandem/training.hpp"

using namespace tandem;
using json = nlohmann::ordered_json;

namespace {

std::string hex(std::uint64_t h) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

// Reports from commands without a config file hash their effective options.
std::string options_hash(const CLI::App& cmd) { return hex(fnv1a(cmd.config_to_str(true, false))); }

TokenDataset load_corpus(const std::string& path, std::size_t synthetic_bytes, std::uint64_t seed) {
  if (!path.empty()) return TokenDataset::from_documents(read_documents(path));
  return TokenDataset::from_documents(synthetic_documents(synthetic_bytes, seed));
}

GenerationMode parse_mode(const std::string& s) {
  if (s == "free-token") return GenerationMode::FREE_TOKEN;
  if (s == "repr-only") return GenerationMode::REPR_ONLY;
  throw CLI::ValidationError("--mode", "expected free-token or repr-only");
}

SamplingMode sampling_from(bool greedy, double temperature) {
  return greedy ? SamplingMode::Greedy() : SamplingMode::Temperature(temperature);
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string variant = "standalone", config, corpus, out, loss_csv;
  std::string init, init_primary, init_secondary, teacher, model = "secondary";
  std::size_t synthetic_bytes = 1'000'000;
  bool fit = false;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

void load_into(DecoderModel<float>& dst, const std::string& path) {
  if (!path.empty()) dst.copy_values_from(*unbundle_decoder(load_checkpoint(path)));
}

int cmd_train(const TrainArgs& a) {
  ExperimentConfig cfg = a.config.empty() ? ExperimentConfig{} : load_config(a.config);
  cfg.train.variant = parse_variant(a.variant);
  if (a.seed_given) {
    cfg.seed = a.seed;
    cfg.train.data_seed = a.seed;
  }
  cfg.train.validate();
  const auto data = load_corpus(a.corpus, a.synthetic_bytes, cfg.train.data_seed);
  const Variant v = cfg.train.variant;

  TrainModels<float> models;
  std::unique_ptr<DecoderModel<float>> decoder, teacher;
  std::unique_ptr<TandemModel<float>> tandem;
  std::unique_ptr<DeepTandemModel<float>> deep;
  std::function<TensorMap()> make_bundle;

  if (v == Variant::STANDALONE || v == Variant::STANDALONE_DISTIL || v == Variant::BLOCK_PARALLEL) {
    const auto& dc = (a.model == "primary" || v == Variant::BLOCK_PARALLEL) ? cfg.primary : cfg.secondary;
    decoder = std::make_unique<DecoderModel<float>>(dc, "", cfg.seed);
    load_into(*decoder, a.init);
    if (v == Variant::BLOCK_PARALLEL) {
      cfg.train.block_gamma = cfg.gamma;
      models.block_parallel = decoder.get();
    } else {
      models.standalone = decoder.get();
    }
    if (v == Variant::STANDALONE_DISTIL) {
      if (a.teacher.empty()) throw CLI::RequiredError("--teacher");
      teacher = unbundle_decoder(load_checkpoint(a.teacher));
      models.teacher = teacher.get();
    }
    make_bundle = [&] { return bundle_decoder(*decoder); };
  } else if (is_tandem_variant(v)) {
    tandem = std::make_unique<TandemModel<float>>(TandemConfig{cfg.primary, cfg.secondary, cfg.gamma, {}, false},
                                                  cfg.seed);
    load_into(tandem->primary, a.init_primary);
    load_into(tandem->secondary, a.init_secondary);
    if (a.fit) fit_projections(*tandem, data, cfg.train.seq_len, 256);
    models.tandem = tandem.get();
    make_bundle = [&] { return bundle_tandem(*tandem); };
  } else {
    deep = std::make_unique<DeepTandemModel<float>>(
        DeepTandemConfig{cfg.primary, cfg.secondary, cfg.gamma, cfg.train.begin_token}, cfg.seed);
    models.deep = deep.get();
    make_bundle = [&] { return bundle_deep(*deep); };
  }

  const std::int64_t every = std::max<std::int64_t>(1, cfg.train.steps / 20);
  auto result = train(models, data, cfg.train, [&](const LossRecord& r) {
    if ((r.step + 1) % every == 0 || r.step + 1 == cfg.train.steps)
      std::cerr << "step " << r.step + 1 << " loss " << r.loss << '\n';
  });
  if (!a.out.empty()) save_checkpoint(make_bundle(), a.out);
  if (!a.loss_csv.empty()) write_loss_csv(a.loss_csv, result.curve);

  json report{{"variant", variant_name(v)},
              {"seed", cfg.seed},
              {"config_hash", hex(config_hash(cfg))},
              {"steps", cfg.train.steps},
              {"final_loss", result.curve.empty() ? 0.0 : result.curve.back().loss},
              {"stage_switch_step", result.stage_switch_step},
              {"checkpoint", a.out}};
  std::cout << report.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, reference, corpus;
  std::size_t synthetic_bytes = 120'000;
  int seq_len = 64, windows = 64, block_gamma = 0;
  bool aligned = false;
  std::uint64_t seed = 2;
};

int cmd_eval(const EvalArgs& a, const CLI::App& cmd) {
  const auto data = load_corpus(a.corpus, a.synthetic_bytes, a.seed);
  const auto tensors = load_checkpoint(a.checkpoint);
  std::unique_ptr<DecoderModel<float>> decoder;
  std::unique_ptr<TandemModel<float>> tandem;
  std::unique_ptr<DeepTandemModel<float>> deep;
  EvalModel model;
  switch (checkpoint_kind(tensors)) {
    case ModelKind::DECODER:
      decoder = unbundle_decoder(tensors);
      model = a.block_gamma > 0 ? eval_block_parallel(*decoder, a.block_gamma, kBeginOfDraftToken)
                                : eval_decoder(*decoder);
      break;
    case ModelKind::TANDEM:
      tandem = unbundle_tandem(tensors);
      model = eval_tandem(*tandem);
      break;
    case ModelKind::DEEP_TANDEM:
      deep = unbundle_deep(tensors);
      model = eval_deep(*deep);
      break;
    default:
      throw std::runtime_error("eval: checkpoint does not hold a language model");
  }
  std::unique_ptr<DecoderModel<float>> ref_model;
  EvalModel ref;
  if (!a.reference.empty()) {
    ref_model = unbundle_decoder(load_checkpoint(a.reference));
    ref = eval_decoder(*ref_model);
  }
  EvalOptions opts{.seq_len = a.seq_len, .max_windows = a.windows, .batch = 8,
                   .align_same_position = a.aligned || model.same_position};
  const auto report = evaluate(model, data, a.reference.empty() ? nullptr : &ref, opts);
  json extra{{"seed", a.seed}, {"config_hash", options_hash(cmd)}, {"checkpoint", a.checkpoint}};
  std::cout << metrics_to_json(report, extra.dump()) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string checkpoint, prompt, mode = "free-token";
  int tokens = 64, gamma = 0;
  bool greedy = false;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

int cmd_generate(const GenerateArgs& a) {
  const auto tensors = load_checkpoint(a.checkpoint);
  const auto prompt = tokenize(a.prompt);
  const auto sampling = sampling_from(a.greedy, a.temperature);
  CounterRng rng(a.seed);
  std::vector<int> out;
  switch (checkpoint_kind(tensors)) {
    case ModelKind::DECODER:
      out = generate(*unbundle_decoder(tensors), prompt, a.tokens, sampling, rng);
      break;
    case ModelKind::TANDEM: {
      auto m = unbundle_tandem(tensors);
      out = tandem_generate(*m, prompt, a.tokens, parse_mode(a.mode), sampling, rng, {.gamma = a.gamma}).tokens;
      break;
    }
    default:
      throw std::runtime_error("generate: needs a decoder or tandem checkpoint");
  }
  std::cout << a.prompt << detokenize(out) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct SpeedArgs {
  std::string checkpoint, prompts, router, drafter, bookkeeping = "free-token";
  int gamma = 4, num_samples = 1, max_tokens = 64;
  bool adaptive = false, greedy = false;
  double temperature = 1.0, tau = -1;
  double cost_primary = 1.0, cost_secondary = -1;
  std::uint64_t seed = 0;
};

std::vector<std::vector<int>> read_prompts(const std::string& path) {
  std::vector<std::vector<int>> out;
  for (const auto& line : read_documents(path)) out.push_back(tokenize(line));
  if (out.empty()) throw std::runtime_error("speed-bench: no prompts in " + path);
  return out;
}

void accumulate(DecodeTrace& total, const DecodeTrace& t) {
  total.primary_runs += t.primary_runs;
  total.prefill_runs += t.prefill_runs;
  total.secondary_steps += t.secondary_steps;
  total.total_tokens += t.total_tokens;
  total.drafted_lengths.insert(total.drafted_lengths.end(), t.drafted_lengths.begin(), t.drafted_lengths.end());
  total.accepted_lengths.insert(total.accepted_lengths.end(), t.accepted_lengths.begin(), t.accepted_lengths.end());
  total.truncated = total.truncated || t.truncated;
}

json trace_summary(const DecodeTrace& t, const CostModel& cost) {
  return {{"primary_runs", t.primary_runs},
          {"secondary_steps", t.secondary_steps},
          {"total_tokens", t.total_tokens},
          {"mean_accepted", t.mean_accepted()},
          {"tokens_per_round", t.tokens_per_round()},
          {"speedup", estimate_speedup(t, cost)}};
}

int cmd_speed(const SpeedArgs& a, const CLI::App& cmd) {
  auto model = unbundle_tandem(load_checkpoint(a.checkpoint));
  const auto prompts = read_prompts(a.prompts);
  SpeedConfig c;
  c.gamma = a.gamma;
  c.num_samples = a.num_samples;
  c.sampling = sampling_from(a.greedy, a.temperature);
  c.seed = a.seed;
  c.bookkeeping = parse_mode(a.bookkeeping);
  c.cost = a.cost_secondary >= 0 ? CostModel{a.cost_primary, a.cost_secondary} : CostModel::param_ratio(*model);
  LoadedRouter router;
  if (a.adaptive) {
    if (a.router.empty()) throw CLI::RequiredError("--router");
    router = unbundle_router(load_checkpoint(a.router));
    c.adaptive = true;
    c.router = router.router.get();
    c.router_config = router.config;
    if (a.tau >= 0) c.router_config.tau = a.tau;
  }
  c.validate();

  DecodeTrace total;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    SpeedConfig ci = c;
    ci.seed = c.seed + i;
    if (c.num_samples == 1) accumulate(total, speed_generate(*model, prompts[i], a.max_tokens, ci).trace);
    else accumulate(total, speed_generate_multi(*model, prompts[i], a.max_tokens, ci).aggregate);
  }
  json report{{"seed", a.seed},
              {"config_hash", options_hash(cmd)},
              {"gamma", a.adaptive ? json(nullptr) : json(a.gamma)},
              {"adaptive", a.adaptive},
              {"num_samples", a.num_samples},
              {"prompts", prompts.size()},
              {"cost", {{"c_primary", c.cost.c_primary}, {"c_secondary", c.cost.c_secondary}}}};
  report.update(trace_summary(total, c.cost));

  std::optional<DecodeTrace> base;
  if (!a.drafter.empty()) {
    if (a.adaptive || a.num_samples != 1) throw CLI::ValidationError("--drafter", "needs a fixed gamma and one sample");
    auto drafter = unbundle_decoder(load_checkpoint(a.drafter));
    base.emplace();
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      SpeedConfig ci = c;
      ci.seed = c.seed + i;
      accumulate(*base, speed_generate_standalone(model->primary, *drafter, prompts[i], a.max_tokens, ci).trace);
    }
    report["baseline"] = trace_summary(*base, c.cost);
  }
  std::cout << report.dump(2) << '\n';

  // Human-readable layout: speedups over the primary alone, and the relative gain.
  std::fprintf(stderr, "%-22s %-12s %-12s %-12s %-10s\n", "drafter", "num-samples", "speedup", "accepted/run",
               "gamma");
  const std::string g = a.adaptive ? "adaptive" : std::to_string(a.gamma);
  if (base)
    std::fprintf(stderr, "%-22s %-12d %-12.3f %-12.3f %-10s\n", "standalone (baseline)", a.num_samples,
                 estimate_speedup(*base, c.cost), base->mean_accepted(), g.c_str());
  std::fprintf(stderr, "%-22s %-12d %-12.3f %-12.3f %-10s\n", "tandem", a.num_samples, estimate_speedup(total, c.cost),
               total.mean_accepted(), g.c_str());
  if (base)
    std::fprintf(stderr, "relative gain %.3fx\n", estimate_speedup(total, c.cost) / estimate_speedup(*base, c.cost));
  return 0;
}

// ---------------------------------------------------------------------------

struct RouterArgs {
  std::string checkpoint, corpus, out;
  std::size_t synthetic_bytes = 200'000;
  int k = 4, hidden = 32, gamma_max = 17, steps = 500, windows = 64, seq_len = 64;
  double tau = 0.8, lr = 3e-3;
  bool invert = false, keep_dataset = false;
  std::uint64_t seed = 0;
};

int cmd_router(const RouterArgs& a, const CLI::App& cmd) {
  auto model = unbundle_tandem(load_checkpoint(a.checkpoint));
  const auto data = load_corpus(a.corpus, a.synthetic_bytes, a.seed);
  RouterConfig rc{a.k, a.hidden, a.tau, a.gamma_max, a.invert};
  rc.validate();
  const auto ds = build_router_dataset(*model, data, a.seq_len, a.windows, rc);
  std::vector<double> curve;
  auto router = train_router<float>(ds, rc, RouterTrainConfig{a.steps, 64, a.lr, a.seed}, &curve);
  save_checkpoint(bundle_router(router, rc, a.keep_dataset ? &ds : nullptr), a.out);
  json report{{"seed", a.seed},
              {"config_hash", options_hash(cmd)},
              {"examples", ds.targets.size()},
              {"initial_loss", curve.empty() ? 0.0 : curve.front()},
              {"final_loss", curve.empty() ? 0.0 : curve.back()},
              {"checkpoint", a.out}};
  std::cout << report.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  kernels::configure_threads_from_env();
  CLI::App app{"Tandem transformers: training, evaluation and speculative decoding"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train one variant and write a checkpoint");
  train_cmd->add_option("--variant", ta.variant, "Training variant")
      ->check(CLI::IsMember({"standalone", "tandem-frozen-primary", "tandem-both-loss-secondary",
                             "tandem-both-loss-both", "standalone-distil", "tandem-distil", "deep-tandem",
                             "block-parallel"}));
  train_cmd->add_option("--config", ta.config, "key = value config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--corpus", ta.corpus, "Newline-delimited documents (default: synthetic)")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--synthetic-bytes", ta.synthetic_bytes, "Size of the synthetic corpus");
  train_cmd->add_option("--out", ta.out, "Checkpoint to write");
  train_cmd->add_option("--loss-csv", ta.loss_csv, "Loss curve CSV");
  train_cmd->add_option("--model", ta.model, "Config section for standalone runs")
      ->check(CLI::IsMember({"primary", "secondary"}));
  train_cmd->add_option("--init", ta.init, "Decoder checkpoint to start from");
  train_cmd->add_option("--init-primary", ta.init_primary, "Decoder checkpoint for the tandem primary");
  train_cmd->add_option("--init-secondary", ta.init_secondary, "Decoder checkpoint for the tandem secondary");
  train_cmd->add_option("--teacher", ta.teacher, "Teacher decoder for standalone-distil");
  train_cmd->add_flag("--fit-projections", ta.fit, "Least-squares projection init before training");
  auto* train_seed = train_cmd->add_option("--seed", ta.seed, "Overrides seed and data_seed");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Accuracy, CE and agreement metrics as JSON");
  eval_cmd->add_option("--checkpoint", ea.checkpoint)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--reference", ea.reference, "Reference decoder checkpoint")->check(CLI::ExistingFile);
  eval_cmd->add_option("--corpus", ea.corpus)->check(CLI::ExistingFile);
  eval_cmd->add_option("--synthetic-bytes", ea.synthetic_bytes);
  eval_cmd->add_option("--seq-len", ea.seq_len)->check(CLI::PositiveNumber);
  eval_cmd->add_option("--windows", ea.windows)->check(CLI::PositiveNumber);
  eval_cmd->add_option("--block-gamma", ea.block_gamma, "Treat a decoder checkpoint as block-parallel");
  eval_cmd->add_flag("--aligned", ea.aligned, "Score targets 1..S-1 only");
  eval_cmd->add_option("--seed", ea.seed, "Synthetic corpus seed");

  GenerateArgs ga;
  auto* gen_cmd = app.add_subcommand("generate", "Sample a continuation");
  gen_cmd->add_option("--checkpoint", ga.checkpoint)->required()->check(CLI::ExistingFile);
  gen_cmd->add_option("--prompt", ga.prompt)->required();
  gen_cmd->add_option("--tokens", ga.tokens)->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--mode", ga.mode)->check(CLI::IsMember({"free-token", "repr-only"}));
  gen_cmd->add_option("--gamma", ga.gamma, "Inference block length (0: trained value)")
      ->check(CLI::NonNegativeNumber);
  auto* gen_greedy = gen_cmd->add_flag("--greedy", ga.greedy);
  gen_cmd->add_option("--temperature", ga.temperature)->check(CLI::PositiveNumber)->excludes(gen_greedy);
  gen_cmd->add_option("--seed", ga.seed);

  SpeedArgs sa;
  auto* speed_cmd = app.add_subcommand("speed-bench", "Speculative decoding with a tandem drafter");
  speed_cmd->add_option("--checkpoint", sa.checkpoint, "Tandem checkpoint")->required()->check(CLI::ExistingFile);
  speed_cmd->add_option("--prompts", sa.prompts, "One prompt per line")->required()->check(CLI::ExistingFile);
  auto* speed_gamma = speed_cmd->add_option("--gamma", sa.gamma)->check(CLI::PositiveNumber);
  speed_cmd->add_flag("--adaptive", sa.adaptive, "Router-controlled block length")->excludes(speed_gamma);
  speed_cmd->add_option("--router", sa.router, "Router checkpoint")->check(CLI::ExistingFile);
  speed_cmd->add_option("--tau", sa.tau, "Override the router threshold");
  speed_cmd->add_option("--drafter", sa.drafter, "Standalone drafter checkpoint for a baseline row")
      ->check(CLI::ExistingFile);
  speed_cmd->add_option("--num-samples", sa.num_samples)->check(CLI::PositiveNumber);
  speed_cmd->add_option("--max-tokens", sa.max_tokens)->check(CLI::PositiveNumber);
  auto* speed_greedy = speed_cmd->add_flag("--greedy", sa.greedy);
  speed_cmd->add_option("--temperature", sa.temperature)->check(CLI::PositiveNumber)->excludes(speed_greedy);
  speed_cmd->add_option("--bookkeeping", sa.bookkeeping)->check(CLI::IsMember({"free-token", "repr-only"}));
  speed_cmd->add_option("--cost-primary", sa.cost_primary)->check(CLI::PositiveNumber);
  speed_cmd->add_option("--cost-secondary", sa.cost_secondary, "Default: parameter ratio");
  speed_cmd->add_option("--seed", sa.seed);

  RouterArgs ra;
  auto* router_cmd = app.add_subcommand("router-train", "Fit the adaptive block-length router");
  router_cmd->add_option("--checkpoint", ra.checkpoint, "Tandem checkpoint")->required()->check(CLI::ExistingFile);
  router_cmd->add_option("--corpus", ra.corpus)->check(CLI::ExistingFile);
  router_cmd->add_option("--synthetic-bytes", ra.synthetic_bytes);
  router_cmd->add_option("--out", ra.out)->required();
  router_cmd->add_option("--k", ra.k)->check(CLI::PositiveNumber);
  router_cmd->add_option("--hidden", ra.hidden)->check(CLI::PositiveNumber);
  router_cmd->add_option("--tau", ra.tau);
  router_cmd->add_option("--gamma-max", ra.gamma_max)->check(CLI::PositiveNumber);
  router_cmd->add_option("--steps", ra.steps)->check(CLI::PositiveNumber);
  router_cmd->add_option("--lr", ra.lr)->check(CLI::PositiveNumber);
  router_cmd->add_option("--windows", ra.windows)->check(CLI::PositiveNumber);
  router_cmd->add_option("--seq-len", ra.seq_len)->check(CLI::PositiveNumber);
  router_cmd->add_flag("--invert", ra.invert, "Continue while predicted disagreement <= tau");
  router_cmd->add_flag("--keep-dataset", ra.keep_dataset, "Store the training examples in the checkpoint");
  router_cmd->add_option("--seed", ra.seed);

  std::uint64_t check_seed = 1;
  auto* check_cmd = app.add_subcommand("selfcheck", "Invariant suite on random micro-models");
  check_cmd->add_option("--seed", check_seed);

  std::string corpus_out;
  std::size_t corpus_bytes = 1'000'000;
  std::uint64_t corpus_seed = 1;
  auto* corpus_cmd = app.add_subcommand("make-corpus", "Write the synthetic corpus");
  corpus_cmd->add_option("--out", corpus_out)->required();
  corpus_cmd->add_option("--bytes", corpus_bytes)->check(CLI::PositiveNumber);
  corpus_cmd->add_option("--seed", corpus_seed);

  CLI11_PARSE(app, argc, argv);
  ta.seed_given = train_seed->count() > 0;

  try {
    if (*train_cmd) return cmd_train(ta);
    if (*eval_cmd) return cmd_eval(ea, *eval_cmd);
    if (*gen_cmd) return cmd_generate(ga);
    if (*speed_cmd) return cmd_speed(sa, *speed_cmd);
    if (*router_cmd) return cmd_router(ra, *router_cmd);
    if (*check_cmd) return tandem::tools::run_selfcheck(std::cout, check_seed) == 0 ? 0 : 1;
    if (*corpus_cmd) {
      write_documents(corpus_out, synthetic_documents(corpus_bytes, corpus_seed));
      return 0;
    }
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
