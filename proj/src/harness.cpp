#include "procl/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace procl::harness {

using ordered_json = nlohmann::ordered_json;

namespace {

// Sub-stream tags for dataset generation; distinct from the model-init tags.
constexpr std::uint64_t kSeedTasks = 100;

std::string format_double(Scalar v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::vector<SyntheticTask> generate_tasks(std::uint64_t seed, int task_count, Index dim,
                                          Index out_dim, Scalar separation, Scalar input_scale,
                                          Scalar noise_std, int n_train, int n_eval) {
  if (task_count < 1) {
    throw ConfigError("generate_tasks: task_count must be positive");
  }
  if (dim < 1 || out_dim < 1) {
    throw ConfigError("generate_tasks: dimensions must be positive");
  }
  if (n_train < 1 || n_eval < 1) {
    throw ConfigError("generate_tasks: dataset sizes must be positive");
  }
  if (!(separation >= 0.0) || !(input_scale > 0.0) || !(noise_std >= 0.0)) {
    throw ConfigError("generate_tasks: invalid distribution parameters");
  }
  if (separation > 0.0 && dim < task_count) {
    std::ostringstream os;
    os << "generate_tasks: input dimension " << dim << " cannot hold " << task_count
       << " orthogonal task means";
    throw ConfigError(os.str());
  }

  const auto make_split = [&](const SyntheticTaskSpec& spec, int n, std::uint64_t input_tag,
                              std::uint64_t noise_tag) {
    Rng rng_x(derive_seed(seed, input_tag));
    Rng rng_n(derive_seed(seed, noise_tag));
    Dataset d;
    d.x = rng_x.gaussian_matrix(n, dim, spec.input_scale);
    d.x.rowwise() += spec.input_mean.transpose();
    d.y = d.x * spec.target_map.transpose() +
          rng_n.gaussian_matrix(n, out_dim, spec.noise_std);
    return d;
  };

  std::vector<SyntheticTask> tasks;
  tasks.reserve(static_cast<std::size_t>(task_count));
  for (int t = 0; t < task_count; ++t) {
    SyntheticTaskSpec spec;
    spec.id = t;
    spec.input_scale = input_scale;
    spec.noise_std = noise_std;
    spec.n_train = n_train;
    spec.n_eval = n_eval;
    spec.input_mean = Vector::Zero(dim);
    if (separation > 0.0) {
      spec.input_mean(t) = separation;
    }
    const auto tag = static_cast<std::uint64_t>(t) * 8;
    Rng rng_map(derive_seed(seed, tag));
    spec.target_map =
        rng_map.gaussian_matrix(out_dim, dim, 1.0 / std::sqrt(static_cast<Scalar>(dim)));

    SyntheticTask task;
    task.train = make_split(spec, n_train, tag + 1, tag + 2);
    task.eval = make_split(spec, n_eval, tag + 3, tag + 4);
    task.spec = std::move(spec);
    tasks.push_back(std::move(task));
  }
  return tasks;
}

Vector per_sample_errors(ModelState& state, const Dataset& data) {
  if (data.size() == 0) {
    throw EmptyInputError("evaluate: empty eval set");
  }
  const Matrix y = predict(state, data.x);
  Vector errors(data.size());
  for (Index i = 0; i < data.size(); ++i) {
    errors(i) = (y.row(i) - data.y.row(i)).squaredNorm() / static_cast<Scalar>(y.cols());
  }
  return errors;
}

Scalar evaluate(ModelState& state, const Dataset& data, Metric metric, Scalar threshold) {
  const Vector errors = per_sample_errors(state, data);
  if (metric == Metric::kMse) {
    return errors.mean();
  }
  if (!(threshold > 0.0)) {
    throw ValueError("evaluate: threshold metric requires a positive threshold");
  }
  Index hits = 0;
  for (Index i = 0; i < errors.size(); ++i) {
    if (errors(i) < threshold) {
      ++hits;
    }
  }
  return static_cast<Scalar>(hits) / static_cast<Scalar>(errors.size());
}

namespace {

void require_triangular(const AccuracyMatrix& m, std::string_view op) {
  if (m.acc.empty()) {
    throw EmptyInputError(std::string(op) + ": empty accuracy matrix");
  }
  for (std::size_t r = 0; r < m.acc.size(); ++r) {
    if (m.acc[r].size() != r + 1) {
      throw ShapeError(op, Shape{static_cast<Index>(r + 1), 1},
                       Shape{static_cast<Index>(m.acc[r].size()), 1});
    }
  }
}

}  // namespace

Scalar average_accuracy(const AccuracyMatrix& m) {
  require_triangular(m, "average_accuracy");
  // Accumulate each cell at its final weight 1 / (rounds * row size); the
  // deferred-division form keeps short decimal examples exact.
  const Scalar rounds = static_cast<Scalar>(m.acc.size());
  Scalar total = 0.0;
  for (const auto& round : m.acc) {
    const Scalar weight = rounds * static_cast<Scalar>(round.size());
    for (const Scalar v : round) {
      total += v / weight;
    }
  }
  return total;
}

Scalar forgetting_first_task(const AccuracyMatrix& m) {
  require_triangular(m, "forgetting_first_task");
  if (m.acc.size() < 3) {
    throw ValueError("forgetting_first_task: needs at least 3 rounds");
  }
  const Scalar first = m.acc[0][0];
  return 0.5 * ((first - m.acc[1][0]) + (first - m.acc[2][0]));
}

Scalar median(std::vector<Scalar> values) {
  if (values.empty()) {
    throw EmptyInputError("median: no values");
  }
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  if (values.size() % 2 == 1) {
    return values[mid];
  }
  return 0.5 * (values[mid - 1] + values[mid]);
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) {
    return "";
  }
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

[[noreturn]] void config_fail(const std::string& origin, int line, const std::string& what) {
  std::ostringstream os;
  os << origin << ":" << line << ": " << what;
  throw ConfigError(os.str());
}

Scalar parse_real(const std::string& origin, int line, const std::string& key,
                  const std::string& value) {
  Scalar out = 0.0;
  const auto res = std::from_chars(value.data(), value.data() + value.size(), out);
  if (res.ec != std::errc{} || res.ptr != value.data() + value.size()) {
    config_fail(origin, line, "invalid number '" + value + "' for key '" + key + "'");
  }
  return out;
}

long long parse_int(const std::string& origin, int line, const std::string& key,
                    const std::string& value) {
  long long out = 0;
  const auto res = std::from_chars(value.data(), value.data() + value.size(), out);
  if (res.ec != std::errc{} || res.ptr != value.data() + value.size()) {
    config_fail(origin, line, "invalid integer '" + value + "' for key '" + key + "'");
  }
  return out;
}

std::uint64_t parse_u64(const std::string& origin, int line, const std::string& key,
                        const std::string& value) {
  std::uint64_t out = 0;
  const auto res = std::from_chars(value.data(), value.data() + value.size(), out);
  if (res.ec != std::errc{} || res.ptr != value.data() + value.size()) {
    config_fail(origin, line, "invalid unsigned integer '" + value + "' for key '" + key + "'");
  }
  return out;
}

bool parse_bool(const std::string& origin, int line, const std::string& key,
                const std::string& value) {
  if (value == "true") {
    return true;
  }
  if (value == "false") {
    return false;
  }
  config_fail(origin, line, "invalid boolean '" + value + "' for key '" + key + "' (use true/false)");
}

int parse_positive_int(const std::string& origin, int line, const std::string& key,
                       const std::string& value) {
  const long long v = parse_int(origin, line, key, value);
  if (v < 1 || v > (1ll << 30)) {
    config_fail(origin, line, "key '" + key + "' must be a positive integer, got '" + value + "'");
  }
  return static_cast<int>(v);
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string s = trim(raw);
    if (s.empty() || s[0] == '#') {
      continue;
    }
    if (s.front() == '[') {
      if (s.back() != ']') {
        config_fail(origin, line, "unterminated section header '" + s + "'");
      }
      section = trim(s.substr(1, s.size() - 2));
      if (section != "train" && section != "tasks" && section != "experiment") {
        config_fail(origin, line, "unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      config_fail(origin, line, "expected key = value, got '" + s + "'");
    }
    const std::string key = trim(s.substr(0, eq));
    const std::string value = trim(s.substr(eq + 1));
    if (key.empty() || value.empty()) {
      config_fail(origin, line, "expected key = value, got '" + s + "'");
    }
    if (section.empty()) {
      config_fail(origin, line, "key '" + key + "' appears before any section header");
    }

    if (section == "train") {
      if (key == "num_programs") {
        cfg.train.num_programs = parse_positive_int(origin, line, key, value);
      } else if (key == "key_dim") {
        cfg.train.key_dim = parse_positive_int(origin, line, key, value);
      } else if (key == "lambda") {
        cfg.train.lambda = parse_real(origin, line, key, value);
        if (!(cfg.train.lambda >= 0.0 && cfg.train.lambda <= 1.0)) {
          config_fail(origin, line, "lambda must lie in [0, 1], got '" + value + "'");
        }
      } else if (key == "rank") {
        cfg.train.rank = parse_positive_int(origin, line, key, value);
      } else if (key == "learning_rate") {
        cfg.train.learning_rate = parse_real(origin, line, key, value);
        if (!(cfg.train.learning_rate >= 0.0)) {
          config_fail(origin, line, "learning_rate must be nonnegative, got '" + value + "'");
        }
      } else if (key == "epochs_per_task") {
        cfg.train.epochs_per_task = parse_positive_int(origin, line, key, value);
      } else if (key == "batch_size") {
        cfg.train.batch_size = parse_positive_int(origin, line, key, value);
      } else if (key == "seed") {
        cfg.train.seed = parse_u64(origin, line, key, value);
      } else if (key == "train_gamma") {
        cfg.train.train_gamma = parse_bool(origin, line, key, value);
      } else {
        config_fail(origin, line, "unknown key '" + key + "' in section [train]");
      }
    } else if (section == "tasks") {
      if (key == "count") {
        cfg.task_count = parse_positive_int(origin, line, key, value);
      } else if (key == "dim") {
        cfg.dim = parse_positive_int(origin, line, key, value);
      } else if (key == "out_dim") {
        cfg.out_dim = parse_positive_int(origin, line, key, value);
      } else if (key == "separation") {
        cfg.separation = parse_real(origin, line, key, value);
        if (!(cfg.separation >= 0.0)) {
          config_fail(origin, line, "separation must be nonnegative, got '" + value + "'");
        }
      } else if (key == "input_scale") {
        cfg.input_scale = parse_real(origin, line, key, value);
        if (!(cfg.input_scale > 0.0)) {
          config_fail(origin, line, "input_scale must be positive, got '" + value + "'");
        }
      } else if (key == "noise_std") {
        cfg.noise_std = parse_real(origin, line, key, value);
        if (!(cfg.noise_std >= 0.0)) {
          config_fail(origin, line, "noise_std must be nonnegative, got '" + value + "'");
        }
      } else if (key == "train_per_task") {
        cfg.train_per_task = parse_positive_int(origin, line, key, value);
      } else if (key == "eval_per_task") {
        cfg.eval_per_task = parse_positive_int(origin, line, key, value);
      } else {
        config_fail(origin, line, "unknown key '" + key + "' in section [tasks]");
      }
    } else {
      if (key == "method") {
        if (value != "procl" && value != "seq_lora") {
          config_fail(origin, line, "method must be procl or seq_lora, got '" + value + "'");
        }
        cfg.method = value;
      } else if (key == "metric") {
        if (value == "mse") {
          cfg.metric = Metric::kMse;
        } else if (value == "threshold") {
          cfg.metric = Metric::kThresholdAccuracy;
        } else {
          config_fail(origin, line, "metric must be mse or threshold, got '" + value + "'");
        }
      } else if (key == "threshold") {
        if (value == "auto") {
          cfg.threshold = 0.0;
        } else {
          cfg.threshold = parse_real(origin, line, key, value);
          if (!(cfg.threshold > 0.0)) {
            config_fail(origin, line, "threshold must be positive or 'auto', got '" + value + "'");
          }
        }
      } else if (key == "output") {
        cfg.output = value;
      } else {
        config_fail(origin, line, "unknown key '" + key + "' in section [experiment]");
      }
    }
  }
  return cfg;
}

ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("parse_config: cannot open " + path);
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_config_text(buffer.str(), path);
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "[train]\n";
  os << "num_programs = " << cfg.train.num_programs << "\n";
  os << "key_dim = " << cfg.train.key_dim << "\n";
  os << "lambda = " << format_double(cfg.train.lambda) << "\n";
  os << "rank = " << cfg.train.rank << "\n";
  os << "learning_rate = " << format_double(cfg.train.learning_rate) << "\n";
  os << "epochs_per_task = " << cfg.train.epochs_per_task << "\n";
  os << "batch_size = " << cfg.train.batch_size << "\n";
  os << "seed = " << cfg.train.seed << "\n";
  os << "train_gamma = " << (cfg.train.train_gamma ? "true" : "false") << "\n";
  os << "\n[tasks]\n";
  os << "count = " << cfg.task_count << "\n";
  os << "dim = " << cfg.dim << "\n";
  os << "out_dim = " << cfg.out_dim << "\n";
  os << "separation = " << format_double(cfg.separation) << "\n";
  os << "input_scale = " << format_double(cfg.input_scale) << "\n";
  os << "noise_std = " << format_double(cfg.noise_std) << "\n";
  os << "train_per_task = " << cfg.train_per_task << "\n";
  os << "eval_per_task = " << cfg.eval_per_task << "\n";
  os << "\n[experiment]\n";
  os << "method = " << cfg.method << "\n";
  os << "metric = " << (cfg.metric == Metric::kMse ? "mse" : "threshold") << "\n";
  os << "threshold = " << (cfg.threshold > 0.0 ? format_double(cfg.threshold) : "auto") << "\n";
  os << "output = " << cfg.output << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Experiment orchestration
// ---------------------------------------------------------------------------

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  const std::vector<SyntheticTask> tasks =
      generate_tasks(derive_seed(cfg.train.seed, kSeedTasks), cfg.task_count, cfg.dim,
                     cfg.out_dim, cfg.separation, cfg.input_scale, cfg.noise_std,
                     cfg.train_per_task, cfg.eval_per_task);

  ModelState state = ModelState::init(cfg.dim, cfg.out_dim, cfg.train);

  ExperimentResult result;
  result.threshold = cfg.threshold;
  if (cfg.metric == Metric::kThresholdAccuracy && !(cfg.threshold > 0.0)) {
    // Calibrate against the untrained model: median task-1 eval error.
    Vector errors = per_sample_errors(state, tasks.front().eval);
    std::vector<Scalar> values(errors.data(), errors.data() + errors.size());
    result.threshold = median(std::move(values));
  }

  result.dataset_checksum = 0x9e3779b97f4a7c15ull;
  for (const SyntheticTask& task : tasks) {
    result.dataset_checksum = derive_seed(result.dataset_checksum, checksum(task.train.x));
    result.dataset_checksum = derive_seed(result.dataset_checksum, checksum(task.train.y));
    result.dataset_checksum = derive_seed(result.dataset_checksum, checksum(task.eval.x));
    result.dataset_checksum = derive_seed(result.dataset_checksum, checksum(task.eval.y));
  }

  std::vector<Dataset> train_sets;
  train_sets.reserve(tasks.size());
  for (const SyntheticTask& task : tasks) {
    train_sets.push_back(task.train);
  }

  const Scalar threshold = result.threshold;
  const Evaluator evaluator = [&tasks, metric = cfg.metric, threshold](ModelState& s, int k) {
    return evaluate(s, tasks[static_cast<std::size_t>(k)].eval, metric, threshold);
  };

  if (cfg.method == "procl") {
    result.log = train_sequence(state, train_sets, cfg.train, evaluator);
  } else if (cfg.method == "seq_lora") {
    result.log = train_seq_lora(state, train_sets, cfg.train, evaluator);
  } else {
    throw ConfigError("run_experiment: unknown method '" + cfg.method + "'");
  }

  result.acc.acc = result.log.accuracy;
  result.average_acc = average_accuracy(result.acc);
  if (result.acc.acc.size() >= 3) {
    result.forgetting = forgetting_first_task(result.acc);
  }

  for (const SyntheticTask& task : tasks) {
    const RoutingState routing = route_pooled(task.eval.x, state.encoder, state.keys);
    Scalar mean_entropy = 0.0;
    for (Index h = 0; h < routing.batch_alpha.rows(); ++h) {
      mean_entropy += routing_entropy(routing.batch_alpha.row(h).transpose());
    }
    result.final_entropy.push_back(mean_entropy /
                                   static_cast<Scalar>(routing.batch_alpha.rows()));
  }
  return result;
}

void write_run_records(const ExperimentResult& result, const ExperimentConfig& cfg,
                       std::ostream& out) {
  ordered_json meta;
  meta["schema"] = "procl-run/1";
  meta["kind"] = "meta";
  meta["method"] = result.log.method;
  meta["seed"] = cfg.train.seed;
  meta["config"] = serialize_config(cfg);
  out << meta.dump() << "\n";

  for (const TaskLog& task : result.log.tasks) {
    for (std::size_t step = 0; step < task.losses.size(); ++step) {
      ordered_json rec;
      rec["kind"] = "batch";
      rec["task"] = task.task_index;
      rec["step"] = step;
      rec["loss"] = task.losses[step];
      std::vector<Scalar> entropy;
      for (Index h = 0; h < task.entropy.cols(); ++h) {
        entropy.push_back(task.entropy(static_cast<Index>(step), h));
      }
      rec["entropy"] = entropy;
      out << rec.dump() << "\n";
    }
  }

  for (std::size_t round = 0; round < result.acc.acc.size(); ++round) {
    ordered_json rec;
    rec["kind"] = "round";
    rec["round"] = round;
    rec["accuracy"] = result.acc.acc[round];
    out << rec.dump() << "\n";
  }

  ordered_json summary;
  summary["kind"] = "summary";
  summary["average_accuracy"] = result.average_acc;
  if (std::isnan(result.forgetting)) {
    summary["forgetting_first_task"] = nullptr;
  } else {
    summary["forgetting_first_task"] = result.forgetting;
  }
  summary["threshold"] = result.threshold;
  summary["final_entropy"] = result.final_entropy;
  summary["dataset_checksum"] = result.dataset_checksum;
  out << summary.dump() << "\n";
}

Scalar routing_overlap(const ModelState& state, const std::vector<SyntheticTask>& tasks) {
  if (tasks.size() < 2) {
    return 0.0;
  }
  std::vector<std::set<int>> dominant;
  dominant.reserve(tasks.size());
  for (const SyntheticTask& task : tasks) {
    const RoutingState routing = route_pooled(task.eval.x, state.encoder, state.keys);
    std::set<int> slots;
    for (Index h = 0; h < routing.batch_alpha.rows(); ++h) {
      Index best = 0;
      routing.batch_alpha.row(h).maxCoeff(&best);
      slots.insert(static_cast<int>(best));
    }
    dominant.push_back(std::move(slots));
  }
  Scalar total = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < dominant.size(); ++i) {
    for (std::size_t j = i + 1; j < dominant.size(); ++j) {
      std::set<int> inter;
      std::set_intersection(dominant[i].begin(), dominant[i].end(), dominant[j].begin(),
                            dominant[j].end(), std::inserter(inter, inter.begin()));
      std::set<int> uni;
      std::set_union(dominant[i].begin(), dominant[i].end(), dominant[j].begin(),
                     dominant[j].end(), std::inserter(uni, uni.begin()));
      total += static_cast<Scalar>(inter.size()) / static_cast<Scalar>(uni.size());
      ++pairs;
    }
  }
  return total / static_cast<Scalar>(pairs);
}

BenchSummary bench_forgetting(const ExperimentConfig& base, int n_seeds) {
  if (n_seeds < 1) {
    throw ConfigError("bench_forgetting: n_seeds must be positive");
  }
  if (base.task_count < 3) {
    throw ConfigError("bench_forgetting: forgetting needs at least 3 tasks");
  }
  BenchSummary summary;
  std::vector<Scalar> aa_p, aa_s, fg_p, fg_s;
  for (int k = 0; k < n_seeds; ++k) {
    ExperimentConfig cfg = base;
    cfg.train.seed = base.train.seed + static_cast<std::uint64_t>(k);

    cfg.method = "procl";
    const ExperimentResult procl = run_experiment(cfg);
    cfg.method = "seq_lora";
    const ExperimentResult seq = run_experiment(cfg);
    if (procl.dataset_checksum != seq.dataset_checksum) {
      throw ContractError("bench_forgetting: arms saw different datasets for one seed");
    }

    BenchSeedResult row;
    row.seed = cfg.train.seed;
    row.procl = BenchArm{procl.average_acc, procl.forgetting, procl.acc};
    row.seq_lora = BenchArm{seq.average_acc, seq.forgetting, seq.acc};
    aa_p.push_back(procl.average_acc);
    aa_s.push_back(seq.average_acc);
    fg_p.push_back(procl.forgetting);
    fg_s.push_back(seq.forgetting);
    summary.per_seed.push_back(std::move(row));
  }
  summary.median_aa_procl = median(aa_p);
  summary.median_aa_seq_lora = median(aa_s);
  summary.median_forgetting_procl = median(fg_p);
  summary.median_forgetting_seq_lora = median(fg_s);
  return summary;
}

void write_bench_records(const BenchSummary& summary, const ExperimentConfig& base,
                         std::ostream& summary_out, std::ostream& table_out) {
  ordered_json meta;
  meta["schema"] = "procl-bench/1";
  meta["kind"] = "meta";
  meta["seeds"] = summary.per_seed.size();
  meta["config"] = serialize_config(base);
  summary_out << meta.dump() << "\n";
  for (const BenchSeedResult& row : summary.per_seed) {
    ordered_json rec;
    rec["kind"] = "bench_seed";
    rec["seed"] = row.seed;
    rec["average_accuracy_procl"] = row.procl.average_acc;
    rec["average_accuracy_seq_lora"] = row.seq_lora.average_acc;
    rec["forgetting_procl"] = row.procl.forgetting;
    rec["forgetting_seq_lora"] = row.seq_lora.forgetting;
    summary_out << rec.dump() << "\n";
  }
  ordered_json medians;
  medians["kind"] = "bench_median";
  medians["average_accuracy_procl"] = summary.median_aa_procl;
  medians["average_accuracy_seq_lora"] = summary.median_aa_seq_lora;
  medians["forgetting_procl"] = summary.median_forgetting_procl;
  medians["forgetting_seq_lora"] = summary.median_forgetting_seq_lora;
  summary_out << medians.dump() << "\n";

  table_out << "seed,method,round,task,accuracy\n";
  for (const BenchSeedResult& row : summary.per_seed) {
    const auto dump_arm = [&](const char* name, const BenchArm& arm) {
      for (std::size_t r = 0; r < arm.acc.acc.size(); ++r) {
        for (std::size_t t = 0; t < arm.acc.acc[r].size(); ++t) {
          table_out << row.seed << "," << name << "," << r << "," << t << ","
                    << format_double(arm.acc.acc[r][t]) << "\n";
        }
      }
    };
    dump_arm("procl", row.procl);
    dump_arm("seq_lora", row.seq_lora);
  }
}

// ---------------------------------------------------------------------------
// Executable proposition checks
// ---------------------------------------------------------------------------

namespace {

theory::TaskGradientRecord random_record(Rng& rng, int rank, int n, int dim, int batch,
                                         int task_id) {
  const Matrix x = rng.gaussian_matrix(batch, dim, 1.0);
  const Matrix w_exec = rng.gaussian_matrix(rank, dim, 0.5);
  const Matrix y_star = rng.gaussian_matrix(batch, rank, 1.0);
  const Matrix alpha = softmax_rows(rng.gaussian_matrix(n, n, 1.5));
  Vector gates(n);
  for (int i = 0; i < n; ++i) {
    gates(i) = sigmoid(rng.gaussian());
  }
  return theory::record_from_linear_model(x, y_star, w_exec, alpha, gates, task_id);
}

ModelState theory_state(std::uint64_t seed, Scalar weight_shift) {
  TrainConfig cfg;
  cfg.num_programs = 4;
  cfg.key_dim = 8;
  cfg.rank = 8;
  cfg.seed = seed;
  ModelState state = ModelState::init(8, 4, cfg);
  state.adapter.weight().array() += weight_shift;
  return state;
}

std::vector<theory::WeightedBatch> jittered_batches(Rng& rng, int count, int per_batch,
                                                    Index dim, Scalar jitter) {
  const Vector base = rng.gaussian_vector(dim, 1.0);
  std::vector<theory::WeightedBatch> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    theory::WeightedBatch batch;
    batch.weight = 1.0;
    for (int s = 0; s < per_batch; ++s) {
      Matrix sample = base.transpose();
      sample += rng.gaussian_matrix(1, dim, jitter);
      batch.samples.push_back(std::move(sample));
    }
    out.push_back(std::move(batch));
  }
  return out;
}

}  // namespace

TheoryOutcome verify_theory(std::uint64_t seed, std::ostream* records) {
  TheoryOutcome out;
  const auto emit = [&](const ordered_json& j) {
    if (records != nullptr) {
      *records << j.dump() << "\n";
    }
  };
  {
    ordered_json meta;
    meta["schema"] = "procl-theory/1";
    meta["kind"] = "meta";
    meta["seed"] = seed;
    emit(meta);
  }

  const auto track_report = [&](const theory::InterferenceReport& report) {
    out.max_decomposition_residual =
        std::max(out.max_decomposition_residual, report.decomposition_residual);
    out.min_slack = std::min(out.min_slack, report.slack);
    out.beta_min = std::min(out.beta_min, report.beta.minCoeff());
    out.beta_max = std::max(out.beta_max, report.beta.maxCoeff());
    if (report.decomposition_residual > 1e-10) {
      ++out.violations;
    }
    if (report.slack < -1e-10) {
      ++out.violations;
    }
    if (report.beta.minCoeff() < 0.0 || report.beta.maxCoeff() > 1.0) {
      ++out.violations;
    }
  };

  // Interference decomposition: exact identity on random constructed instances.
  {
    Rng rng(derive_seed(seed, 201));
    for (int i = 0; i < 100; ++i) {
      const auto rec_t = random_record(rng, 8, 4, 6, 3, 0);
      const auto rec_u = random_record(rng, 8, 4, 6, 3, 1);
      const auto report = theory::check_interference_bound(rec_t, rec_u);
      track_report(report);
      ordered_json rec;
      rec["kind"] = "interference_report";
      rec["case"] = "random";
      rec["instance"] = i;
      rec["j_procl"] = report.j_procl;
      rec["s"] = report.s;
      rec["bound_rhs"] = report.bound_rhs;
      rec["slack"] = report.slack;
      rec["decomposition_residual"] = report.decomposition_residual;
      rec["beta"] = std::vector<Scalar>(report.beta.data(),
                                        report.beta.data() + report.beta.size());
      emit(rec);
    }
  }

  // Interference bound and beta range over many random routing/gate pairs.
  {
    Rng rng(derive_seed(seed, 202));
    for (int i = 0; i < 10000; ++i) {
      const auto rec_t = random_record(rng, 4, 4, 3, 2, 0);
      const auto rec_u = random_record(rng, 4, 4, 3, 2, 1);
      track_report(theory::check_interference_bound(rec_t, rec_u));
    }
    ordered_json rec;
    rec["kind"] = "beta_sweep";
    rec["pairs"] = 10000;
    rec["beta_min"] = out.beta_min;
    rec["beta_max"] = out.beta_max;
    rec["min_slack"] = out.min_slack;
    emit(rec);
  }

  // Disjoint one-hot routings force zero interaction.
  {
    Rng rng(derive_seed(seed, 203));
    const int n = 4, rank = 8, dim = 6;
    for (int i = 0; i < 100; ++i) {
      Matrix alpha_t = Matrix::Zero(n, n);
      Matrix alpha_u = Matrix::Zero(n, n);
      for (int h = 0; h < n; ++h) {
        const int slot_t = static_cast<int>(rng.next_u64() % n);
        int slot_u = static_cast<int>(rng.next_u64() % (n - 1));
        if (slot_u >= slot_t) {
          ++slot_u;
        }
        alpha_t(h, slot_t) = 1.0;
        alpha_u(h, slot_u) = 1.0;
      }
      Vector gates(n);
      for (int g = 0; g < n; ++g) {
        gates(g) = sigmoid(rng.gaussian());
      }
      const auto rec_t = theory::make_task_gradient_record(
          rng.gaussian_matrix(rank, dim, 1.0), alpha_t, gates, 0);
      const auto rec_u = theory::make_task_gradient_record(
          rng.gaussian_matrix(rank, dim, 1.0), alpha_u, gates, 1);
      const Scalar j = theory::cross_task_j(rec_t.routed_grad, rec_u.routed_grad);
      out.max_disjoint_j = std::max(out.max_disjoint_j, j);
      if (j > 1e-10) {
        ++out.violations;
      }
    }
    ordered_json rec;
    rec["kind"] = "disjoint_routing";
    rec["instances"] = 100;
    rec["max_j"] = out.max_disjoint_j;
    emit(rec);
  }

  // Single head with identical routing attains the bound with equality.
  {
    Rng rng(derive_seed(seed, 204));
    for (int i = 0; i < 50; ++i) {
      const Matrix alpha = Matrix::Ones(1, 1);
      Vector gates(1);
      gates(0) = sigmoid(rng.gaussian());
      const auto rec_t = theory::make_task_gradient_record(
          rng.gaussian_matrix(4, 5, 1.0), alpha, gates, 0);
      const auto rec_u = theory::make_task_gradient_record(
          rng.gaussian_matrix(4, 5, 1.0), alpha, gates, 1);
      const auto report = theory::check_interference_bound(rec_t, rec_u);
      out.max_equality_gap = std::max(out.max_equality_gap, std::abs(report.slack));
      if (std::abs(report.slack) > 1e-10) {
        ++out.violations;
      }
    }
    ordered_json rec;
    rec["kind"] = "single_head_equality";
    rec["instances"] = 50;
    rec["max_gap"] = out.max_equality_gap;
    emit(rec);
  }

  // Consolidation decay: a deterministic stream contracts exactly at rate (1 - lambda).
  {
    const ModelState state = theory_state(derive_seed(seed, 205), 1.5);
    Rng rng(derive_seed(seed, 206));
    const auto dist = jittered_batches(rng, 1, 3, state.dim(), 0.3);
    const auto trace = theory::consolidation_recursion_check(state, dist, 0.9, 50, 1,
                                                             derive_seed(seed, 207));
    const Scalar initial = trace.error_norms.front();
    const Scalar scale = std::max(1.0, initial);
    for (std::size_t t = 0; t < trace.error_norms.size(); ++t) {
      const Scalar expected = std::pow(0.1, static_cast<Scalar>(t)) * initial;
      const Scalar deviation = std::abs(trace.error_norms[t] - expected) / scale;
      out.max_det_decay_err = std::max(out.max_det_decay_err, deviation);
      if (expected >= 1e-3 * initial && expected > 0.0) {
        out.max_det_rel_err = std::max(out.max_det_rel_err,
                                       std::abs(trace.error_norms[t] - expected) / expected);
      }
    }
    if (out.max_det_decay_err > 1e-12 || out.max_det_rel_err > 1e-12) {
      ++out.violations;
    }
    ordered_json rec;
    rec["kind"] = "consolidation_trace";
    rec["case"] = "deterministic";
    rec["lambda"] = trace.lambda;
    rec["max_scaled_deviation"] = out.max_det_decay_err;
    rec["max_relative_error"] = out.max_det_rel_err;
    rec["error_norms"] = trace.error_norms;
    emit(rec);
  }

  // Consolidation fixed point: starting at the fixed point stays there.
  {
    ModelState state = theory_state(derive_seed(seed, 208), 1.0);
    Rng rng(derive_seed(seed, 209));
    const auto dist = jittered_batches(rng, 1, 3, state.dim(), 0.3);
    // The composed mixture is linear in W with gate-bounded coefficients, so
    // iterating W <- W*(W) converges to the joint fixed point of composition
    // and consolidation; one assignment alone is not yet stationary.
    for (int i = 0; i < 200; ++i) {
      state.adapter.weight() = theory::consolidation_fixed_point(state, dist);
    }
    const auto trace = theory::consolidation_recursion_check(state, dist, 0.9, 50, 1,
                                                             derive_seed(seed, 210));
    out.fixed_point_residual =
        *std::max_element(trace.error_norms.begin(), trace.error_norms.end());
    if (out.fixed_point_residual > 1e-10 * std::max(1.0, trace.w_star.norm())) {
      ++out.violations;
    }
    ordered_json rec;
    rec["kind"] = "consolidation_trace";
    rec["case"] = "fixed_point";
    rec["lambda"] = trace.lambda;
    rec["max_error"] = out.fixed_point_residual;
    emit(rec);
  }

  // Stochastic stream: Monte-Carlo mean decay matches the same rate.
  {
    const ModelState state = theory_state(derive_seed(seed, 211), 2.0);
    Rng rng(derive_seed(seed, 212));
    const auto dist = jittered_batches(rng, 4, 2, state.dim(), 0.05);
    const auto trace = theory::consolidation_recursion_check(state, dist, 0.9, 30, 200,
                                                             derive_seed(seed, 213));
    out.stochastic_rate = trace.fitted_rate;
    out.stochastic_target = std::log(1.0 - 0.9);
    out.stochastic_fit_points = trace.fit_points;
    if (trace.fit_points < 3 ||
        std::abs(trace.fitted_rate - out.stochastic_target) >
            0.05 * std::abs(out.stochastic_target)) {
      ++out.violations;
    }
    ordered_json rec;
    rec["kind"] = "consolidation_trace";
    rec["case"] = "stochastic";
    rec["lambda"] = trace.lambda;
    rec["runs"] = 200;
    rec["fitted_rate"] = trace.fitted_rate;
    rec["target_rate"] = out.stochastic_target;
    rec["fit_points"] = trace.fit_points;
    rec["noise_floor"] = trace.noise_floor;
    rec["error_norms"] = trace.error_norms;
    emit(rec);
  }

  return out;
}

}  // namespace procl::harness
