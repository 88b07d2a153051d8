#include "gto/lab.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

namespace gto::lab {

using nlohmann::json;

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kCorpusStream = 1;
constexpr std::uint64_t kPhase2Stream = 2;
constexpr std::uint64_t kEvalStream = 3;

std::string placement_name(GroupPlacement p) {
  return p == GroupPlacement::packed ? "packed" : "random";
}

GroupPlacement parse_placement(const std::string& s) {
  if (s == "packed") return GroupPlacement::packed;
  if (s == "random") return GroupPlacement::random;
  throw ConfigError("unknown group placement '" + s + "'");
}

std::string selection_name(SelectionMode m) {
  return m == SelectionMode::greedy_match ? "greedy_match" : "expected_length";
}

SelectionMode parse_selection(const std::string& s) {
  if (s == "expected_length") return SelectionMode::expected_length;
  if (s == "greedy_match") return SelectionMode::greedy_match;
  throw ConfigError("unknown selection mode '" + s + "'");
}

// Rejects keys in `given` that the default layout does not know.
void check_known_keys(const json& given, const json& known, const std::string& path) {
  if (!given.is_object()) return;
  for (auto it = given.begin(); it != given.end(); ++it) {
    if (!known.contains(it.key())) {
      throw ConfigError("unknown config key '" + path + it.key() + "'");
    }
    const auto& k = known.at(it.key());
    if (k.is_object()) check_known_keys(it.value(), k, path + it.key() + ".");
  }
}

std::uint64_t hash_tokens(std::span<const Token> toks) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Token t : toks) {
    h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(t));
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

GTOConfig ExperimentConfig::effective_gto() const {
  GTOConfig g = gto;
  g.policy = policy;
  g.reward = reward;
  g.seed = derive_seed(world.seed, kPhase2Stream + 16 * gto.seed);
  return g;
}

void ExperimentConfig::validate() const {
  try {
    if (world.vocab < 2) throw ConfigError("world.vocab must be >= 2");
    if (world.order < 1) throw ConfigError("world.order must be >= 1");
    if (!(world.concentration > 0.0)) throw ConfigError("world.concentration must be > 0");
    if (drafter.order < 0) throw ConfigError("drafter.order must be >= 0");
    if (corpus.sequences < 1 || corpus.length < 1) throw ConfigError("corpus must be nonempty");
    if (corpus.eval_prompts < 1 || corpus.prompt_length < 0 || corpus.eval_tokens < 1) {
      throw ConfigError("evaluation prompts misconfigured");
    }
    if (phase1.epochs < 0 || !(phase1.learning_rate > 0.0)) {
      throw ConfigError("phase1 needs epochs >= 0 and learning_rate > 0");
    }
    for (double t : eval.temperatures) static_cast<void>(Temperature(t));
    eval.cost.validate();
    effective_gto().validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

json to_json(const ExperimentConfig& c) {
  json token_budget = c.policy.token_budget ? json(*c.policy.token_budget) : json(nullptr);
  return {
      {"world",
       {{"seed", c.world.seed},
        {"vocab", c.world.vocab},
        {"order", c.world.order},
        {"concentration", c.world.concentration}}},
      {"drafter", {{"order", c.drafter.order}}},
      {"corpus",
       {{"sequences", c.corpus.sequences},
        {"length", c.corpus.length},
        {"eval_prompts", c.corpus.eval_prompts},
        {"prompt_length", c.corpus.prompt_length},
        {"eval_tokens", c.corpus.eval_tokens}}},
      {"phase1", {{"epochs", c.phase1.epochs}, {"learning_rate", c.phase1.learning_rate}}},
      {"policy",
       {{"depth", c.policy.depth},
        {"layer_topk", c.policy.layer_topk},
        {"leaf_budget", c.policy.leaf_budget},
        {"token_budget", token_budget}}},
      {"reward", {{"eta", c.reward.eta}, {"aggregator", to_string(c.reward.aggregator)}}},
      {"gto",
       {{"group_size", c.gto.group_size},
        {"groups_per_seq", c.gto.groups_per_seq},
        {"clip_eps", c.gto.clip_eps},
        {"std_floor", c.gto.std_floor},
        {"loss_weight", c.gto.loss_weight},
        {"learning_rate", c.gto.learning_rate},
        {"epochs", c.gto.epochs},
        {"seed", c.gto.seed},
        {"debias", c.gto.debias},
        {"placement", placement_name(c.gto.placement)},
        {"selection", selection_name(c.gto.selection)},
        {"reward_temperature", c.gto.reward_temperature.value()}}},
      {"eval",
       {{"temperatures", c.eval.temperatures},
        {"target_pass_cost", c.eval.cost.target_pass_cost},
        {"draft_pass_cost", c.eval.cost.draft_pass_cost}}},
      {"output_dir", c.output_dir},
  };
}

ExperimentConfig config_from_json(const json& given) {
  const ExperimentConfig defaults;
  json merged = to_json(defaults);
  if (!given.is_null()) {
    if (!given.is_object()) throw ConfigError("config must be a JSON object");
    check_known_keys(given, merged, "");
    merged.merge_patch(given);
  }
  ExperimentConfig c;
  try {
    const auto& w = merged.at("world");
    c.world = {w.at("seed").get<std::uint64_t>(), w.at("vocab").get<int>(), w.at("order").get<int>(),
               w.at("concentration").get<double>()};
    c.drafter.order = merged.at("drafter").at("order").get<int>();
    const auto& co = merged.at("corpus");
    c.corpus = {co.at("sequences").get<int>(), co.at("length").get<int>(),
                co.at("eval_prompts").get<int>(), co.at("prompt_length").get<int>(),
                co.at("eval_tokens").get<int>()};
    const auto& p1 = merged.at("phase1");
    c.phase1 = {p1.at("epochs").get<int>(), p1.at("learning_rate").get<double>()};
    const auto& po = merged.at("policy");
    c.policy.depth = po.at("depth").get<int>();
    c.policy.layer_topk = po.at("layer_topk").get<int>();
    c.policy.leaf_budget = po.at("leaf_budget").get<int>();
    const auto tb = po.value("token_budget", json(nullptr));
    c.policy.token_budget = tb.is_null() ? std::nullopt : std::optional<int>(tb.get<int>());
    const auto& rw = merged.at("reward");
    c.reward.eta = rw.at("eta").get<double>();
    c.reward.aggregator = parse_aggregator(rw.at("aggregator").get<std::string>());
    const auto& g = merged.at("gto");
    c.gto.group_size = g.at("group_size").get<int>();
    c.gto.groups_per_seq = g.at("groups_per_seq").get<int>();
    c.gto.clip_eps = g.at("clip_eps").get<double>();
    c.gto.std_floor = g.at("std_floor").get<double>();
    c.gto.loss_weight = g.at("loss_weight").get<double>();
    c.gto.learning_rate = g.at("learning_rate").get<double>();
    c.gto.epochs = g.at("epochs").get<int>();
    c.gto.seed = g.at("seed").get<std::uint64_t>();
    c.gto.debias = g.at("debias").get<bool>();
    c.gto.placement = parse_placement(g.at("placement").get<std::string>());
    c.gto.selection = parse_selection(g.at("selection").get<std::string>());
    c.gto.reward_temperature = Temperature(g.at("reward_temperature").get<double>());
    const auto& ev = merged.at("eval");
    c.eval.temperatures = ev.at("temperatures").get<std::vector<double>>();
    c.eval.cost = {ev.at("target_pass_cost").get<double>(), ev.at("draft_pass_cost").get<double>()};
    c.output_dir = merged.at("output_dir").get<std::string>();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override must look like section.key=value: '" + assignment + "'");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;  // bare strings such as lse or packed
  }
  json* node = &config;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) *node = json::object();
    node = &(*node)[parts[i]];
  }
  if (!node->is_object()) *node = json::object();
  (*node)[parts.back()] = value;
}

// ---------------------------------------------------------------------------

TabularMarkovModel make_world(std::uint64_t seed, int vocab, int order, double concentration) {
  if (!(concentration > 0.0)) throw std::domain_error("concentration must be > 0");
  if (order < 1) throw std::domain_error("world order must be >= 1");
  Rng rng(seed);
  std::gamma_distribution<double> gamma(concentration, 1.0);
  std::size_t rows = 1;
  for (int i = 0; i < order; ++i) rows *= static_cast<std::size_t>(vocab);
  const auto v = static_cast<std::size_t>(vocab);
  std::vector<double> table(rows * v);
  for (std::size_t r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (std::size_t i = 0; i < v; ++i) {
      table[r * v + i] = gamma(rng.engine());
      sum += table[r * v + i];
    }
    if (!(sum > 0.0)) {
      // Every draw underflowed; fall back to a point mass on a random token.
      table[r * v + rng.uniform_int(v)] = 1.0;
      sum = 1.0;
    }
    for (std::size_t i = 0; i < v; ++i) table[r * v + i] /= sum;
  }
  return TabularMarkovModel(vocab, order, 0, std::move(table));
}

Dataset make_dataset(const ConditionalModel& target, const CorpusConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const Temperature unit(1.0);
  Dataset data;
  data.corpus.reserve(static_cast<std::size_t>(cfg.sequences));
  for (int i = 0; i < cfg.sequences; ++i) {
    data.corpus.push_back(
        sample_sequence(target, {}, static_cast<std::size_t>(cfg.length), unit, rng));
  }

  // Every window of prompt length inside the corpus is off limits.
  std::unordered_set<std::uint64_t> seen;
  const auto plen = static_cast<std::size_t>(cfg.prompt_length);
  for (const auto& seq : data.corpus) {
    for (std::size_t i = 0; i + plen <= seq.size(); ++i) {
      seen.insert(hash_tokens(std::span<const Token>(seq).subspan(i, plen)));
    }
  }
  std::set<TokenSeq> chosen;
  int attempts = 0;
  while (static_cast<int>(data.prompts.size()) < cfg.eval_prompts) {
    if (++attempts > 1000 * cfg.eval_prompts) {
      throw std::runtime_error("could not draw enough held-out prompts; raise prompt_length");
    }
    auto p = sample_sequence(target, {}, plen, unit, rng);
    if (plen > 0 && seen.count(hash_tokens(p))) continue;
    if (plen > 0 && !chosen.insert(p).second) continue;
    data.prompts.push_back(std::move(p));
  }
  return data;
}

double mean_conditional_entropy(const ConditionalModel& target, std::span<const TokenSeq> corpus) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : corpus) {
    for (const auto& ctx : teacher_forced_contexts(seq)) {
      for (double p : target.base_distribution(ctx)) {
        if (p > 0.0) total -= p * std::log(p);
      }
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

DecodeMetrics evaluate_drafter(const ConditionalModel& target, const ConditionalModel& draft,
                               std::span<const TokenSeq> prompts, const ExperimentConfig& cfg,
                               Temperature temp) {
  DecodeMetrics total;
  total.vanilla_cost_per_token = cfg.eval.cost.target_pass_cost;
  const auto temp_tag = static_cast<std::uint64_t>(std::llround(temp.value() * 1000.0));
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    Rng rng(derive_seed(derive_seed(cfg.world.seed, kEvalStream), i * 100003 + temp_tag));
    const auto run =
        speculative_decode(target, draft, prompts[i], static_cast<std::size_t>(cfg.corpus.eval_tokens),
                           cfg.policy, temp, cfg.eval.cost, rng);
    total.merge(run.metrics);
  }
  return total;
}

TrainedModels prepare(const ExperimentConfig& cfg) {
  cfg.validate();
  auto target = make_world(cfg.world.seed, cfg.world.vocab, cfg.world.order, cfg.world.concentration);
  auto data = make_dataset(target, cfg.corpus, derive_seed(cfg.world.seed, kCorpusStream));
  const LinearSoftmaxModel init(cfg.world.vocab, cfg.drafter.order, 0);
  WarmupReport warm;
  auto ref = warmup_phase1(init, target, data.corpus, cfg.phase1.epochs, cfg.phase1.learning_rate,
                           &warm);
  return {std::move(target), std::move(data), std::move(ref), std::move(warm)};
}

namespace {

json evaluation_rows(const TabularMarkovModel& target, const LinearSoftmaxModel& model,
                     const std::string& name, std::span<const TokenSeq> prompts,
                     const ExperimentConfig& cfg) {
  json rows = json::array();
  for (double t : cfg.eval.temperatures) {
    const auto m = evaluate_drafter(target, model, prompts, cfg, Temperature(t));
    rows.push_back({{"model", name}, {"temperature", t}, {"metrics", m.to_json()}});
  }
  return rows;
}

double tau_of(const json& rows, const std::string& model, double temp) {
  for (const auto& r : rows) {
    if (r.at("model") == model && r.at("temperature").get<double>() == temp) {
      return r.at("metrics").at("tau").get<double>();
    }
  }
  return 0.0;
}

}  // namespace

json run_experiment(const ExperimentConfig& cfg, const StepLogger& log,
                    ExperimentArtifacts* artifacts) {
  auto prepared = prepare(cfg);
  const auto& target = prepared.target;
  const auto& ref = prepared.reference;

  const std::uint64_t ref_hash = ref.parameter_hash();
  LinearSoftmaxModel model = ref;
  const auto phase2 = run_phase2(model, ref, target, prepared.data.corpus, cfg.effective_gto(), log);
  LinearSoftmaxModel control = ref;
  auto control_cfg = cfg.effective_gto();
  control_cfg.loss_weight = 0.0;
  run_phase2(control, ref, target, prepared.data.corpus, control_cfg);
  if (ref.parameter_hash() != ref_hash) throw std::logic_error("reference drafter was mutated");

  json evaluation = json::array();
  const std::pair<const char*, const LinearSoftmaxModel*> evaluated[] = {
      {"reference", &ref}, {"control", &control}, {"gto", &model}};
  for (const auto& [name, drafter] : evaluated) {
    for (auto& row : evaluation_rows(target, *drafter, name, prepared.data.prompts, cfg)) {
      evaluation.push_back(std::move(row));
    }
  }

  if (artifacts) {
    artifacts->target = target;
    artifacts->reference = ref;
    artifacts->trained = model;
  }

  json summary = json::array();
  for (double t : cfg.eval.temperatures) {
    const double control = tau_of(evaluation, "control", t);
    const double gto = tau_of(evaluation, "gto", t);
    summary.push_back({{"temperature", t},
                       {"tau_control", control},
                       {"tau_gto", gto},
                       {"tau_relative_gain", control > 0.0 ? gto / control - 1.0 : 0.0}});
  }

  return {
      {"schema", kReportSchema},
      {"version", kReportVersion},
      {"kind", "experiment"},
      {"config", to_json(cfg)},
      {"training",
       {{"target_entropy", mean_conditional_entropy(target, prepared.data.corpus)},
        {"phase1_loss", prepared.warmup.epoch_loss},
        {"phase2_token_loss", phase2.epoch_token_loss},
        {"phase2_gto_loss", phase2.epoch_gto_loss},
        {"phase2_mean_reward", phase2.epoch_mean_reward},
        {"reference_hash", ref_hash}}},
      {"evaluation", std::move(evaluation)},
      {"summary", std::move(summary)},
  };
}

AblationAxis parse_axis(const std::string& name) {
  if (name == "aggregator") return AblationAxis::aggregator;
  if (name == "group_size") return AblationAxis::group_size;
  if (name == "debias") return AblationAxis::debias;
  throw ConfigError("unknown ablation axis '" + name + "'");
}

std::string to_string(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::aggregator: return "aggregator";
    case AblationAxis::group_size: return "group_size";
    case AblationAxis::debias: return "debias";
  }
  return "?";
}

json run_ablation(const ExperimentConfig& cfg, AblationAxis axis) {
  const auto prepared = prepare(cfg);

  std::vector<std::pair<std::string, ExperimentConfig>> variants;
  switch (axis) {
    case AblationAxis::aggregator:
      for (auto a : {Aggregator::lse, Aggregator::max, Aggregator::sum_avg}) {
        auto c = cfg;
        c.reward.aggregator = a;
        variants.emplace_back(to_string(a), c);
      }
      break;
    case AblationAxis::group_size:
      for (int m : {1, 4, 8, 16, 32}) {
        auto c = cfg;
        c.gto.group_size = m;
        variants.emplace_back("m=" + std::to_string(m), c);
      }
      break;
    case AblationAxis::debias:
      for (bool on : {true, false}) {
        auto c = cfg;
        c.gto.debias = on;
        variants.emplace_back(on ? "debias_on" : "debias_off", c);
      }
      break;
  }

  json rows = json::array();
  for (const auto& [setting, c] : variants) {
    LinearSoftmaxModel model = prepared.reference;
    run_phase2(model, prepared.reference, prepared.target, prepared.data.corpus, c.effective_gto());
    for (double t : c.eval.temperatures) {
      const auto m = evaluate_drafter(prepared.target, model, prepared.data.prompts, c, Temperature(t));
      rows.push_back({{"setting", setting},
                      {"temperature", t},
                      {"tau", m.tau()},
                      {"speedup_proxy", m.speedup_proxy()},
                      {"config", to_json(c)}});
    }
  }
  return {{"schema", kReportSchema},
          {"version", kReportVersion},
          {"kind", "ablation"},
          {"axis", to_string(axis)},
          {"config", to_json(cfg)},
          {"rows", std::move(rows)}};
}

std::vector<std::string> validate_report(const json& r) {
  std::vector<std::string> problems;
  auto need = [&](const json& obj, const char* key, auto pred, const char* what) {
    if (!obj.is_object() || !obj.contains(key) || !pred(obj.at(key))) {
      problems.push_back(std::string("field '") + key + "' missing or not " + what);
      return false;
    }
    return true;
  };
  const auto is_num = [](const json& j) { return j.is_number(); };
  const auto is_str = [](const json& j) { return j.is_string(); };
  const auto is_arr = [](const json& j) { return j.is_array(); };
  const auto is_obj = [](const json& j) { return j.is_object(); };

  if (need(r, "schema", is_str, "a string") && r.at("schema") != kReportSchema) {
    problems.push_back("unexpected schema name");
  }
  if (need(r, "version", is_num, "a number") && r.at("version") != kReportVersion) {
    problems.push_back("unsupported report version");
  }
  need(r, "config", is_obj, "an object");
  if (!need(r, "kind", is_str, "a string")) return problems;

  if (r.at("kind") == "experiment") {
    need(r, "training", is_obj, "an object");
    need(r, "summary", is_arr, "an array");
    if (need(r, "evaluation", is_arr, "an array")) {
      for (const auto& row : r.at("evaluation")) {
        need(row, "model", is_str, "a string");
        need(row, "temperature", is_num, "a number");
        if (!need(row, "metrics", is_obj, "an object")) continue;
        const auto& m = row.at("metrics");
        for (const char* key : {"tau", "cycles", "total_tokens", "speedup_proxy",
                                "greedy_pruned_frac", "greedy_accept_match_frac"}) {
          need(m, key, is_num, "a number");
        }
        need(m, "per_cycle_histogram", is_arr, "an array");
        if (m.contains("tau") && m.at("tau").is_number() && m.at("tau").get<double>() < 1.0) {
          problems.push_back("tau below 1");
        }
        for (const char* key : {"greedy_pruned_frac", "greedy_accept_match_frac"}) {
          if (m.contains(key) && m.at(key).is_number()) {
            const double f = m.at(key).get<double>();
            if (f < 0.0 || f > 1.0) problems.push_back(std::string(key) + " outside [0,1]");
          }
        }
      }
    }
  } else if (r.at("kind") == "ablation") {
    need(r, "axis", is_str, "a string");
    if (need(r, "rows", is_arr, "an array")) {
      for (const auto& row : r.at("rows")) {
        need(row, "setting", is_str, "a string");
        need(row, "temperature", is_num, "a number");
        need(row, "tau", is_num, "a number");
        need(row, "speedup_proxy", is_num, "a number");
      }
    }
  } else {
    problems.push_back("unknown report kind");
  }
  return problems;
}

std::string render_tables(const json& report) {
  std::ostringstream out;
  out.precision(6);
  if (report.value("kind", "") == "ablation") {
    out << "axis,setting,temperature,tau,speedup_proxy\n";
    for (const auto& row : report.at("rows")) {
      out << report.at("axis").get<std::string>() << ',' << row.at("setting").get<std::string>()
          << ',' << row.at("temperature").get<double>() << ',' << row.at("tau").get<double>() << ','
          << row.at("speedup_proxy").get<double>() << '\n';
    }
    return out.str();
  }
  out << "model,temperature,tau,speedup_proxy,cycles,total_tokens,greedy_pruned_frac,"
         "greedy_accept_match_frac\n";
  for (const auto& row : report.at("evaluation")) {
    const auto& m = row.at("metrics");
    out << row.at("model").get<std::string>() << ',' << row.at("temperature").get<double>() << ','
        << m.at("tau").get<double>() << ',' << m.at("speedup_proxy").get<double>() << ','
        << m.at("cycles").get<std::int64_t>() << ',' << m.at("total_tokens").get<std::int64_t>()
        << ',' << m.at("greedy_pruned_frac").get<double>() << ','
        << m.at("greedy_accept_match_frac").get<double>() << '\n';
  }
  return out.str();
}

void emit_diagnostics(const json& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name);
    if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open("report.json");
    f << report.dump(2) << '\n';
  }
  {
    auto f = open("diagnostics.csv");
    f << render_tables(report);
  }
  if (report.value("kind", "") == "experiment") {
    auto f = open("histograms.csv");
    f << "model,temperature,emitted,cycles\n";
    for (const auto& row : report.at("evaluation")) {
      const auto& hist = row.at("metrics").at("per_cycle_histogram");
      for (std::size_t i = 0; i < hist.size(); ++i) {
        f << row.at("model").get<std::string>() << ',' << row.at("temperature").get<double>() << ','
          << i << ',' << hist[i].get<std::int64_t>() << '\n';
      }
    }
  }
}

}  // namespace gto::lab
