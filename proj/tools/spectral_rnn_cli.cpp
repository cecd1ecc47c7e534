// Batch front-end: every subcommand writes its artifacts plus manifest.json
// into the output directory. Exit codes: 0 ok, 2 config, 3 numerical, 4 I/O.

#include <CLI11.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "spectral_rnn/config.hpp"
#include "spectral_rnn/cp.hpp"
#include "spectral_rnn/diagnostics.hpp"
#include "spectral_rnn/gloree.hpp"
#include "spectral_rnn/io.hpp"
#include "spectral_rnn/moments.hpp"
#include "spectral_rnn/score.hpp"

using namespace srnn;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  const bool ok = ctx && EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, md, &len) == 1;
  EVP_MD_CTX_free(ctx);
  require(ok, "cli", "SHA-256 failed", ErrorKind::io);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i)
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

struct Options {
  std::string config, out, format, data, truth, estimate, tensor, m1;
  std::vector<std::string> sets;
  std::uint64_t seed = 1;
  int workers = 0;
  long long rank = -1;
};

// Tracks written files for the manifest.
class Run {
 public:
  Run(std::string sub, const Options& o) : sub_(std::move(sub)), o_(o) {
    workers_ = o.workers > 0 ? o.workers : default_workers();
  }

  void load_config(bool required) {
    if (o_.config.empty()) {
      require(!required, "cli", "--config is required for " + sub_, ErrorKind::config);
      if (!o_.sets.empty()) fail("cli", "--set needs --config", ErrorKind::config);
      return;
    }
    cfg_ = parse_config(o_.config, o_.sets);
  }
  const ExperimentConfig& cfg() const { return *cfg_; }
  bool has_config() const { return cfg_.has_value(); }
  int workers() const { return workers_; }
  std::uint64_t seed() const { return o_.seed; }
  const Options& opts() const { return o_; }

  fs::path out_dir() const {
    if (!o_.out.empty()) return o_.out;
    return cfg_ ? fs::path(cfg_->str("output.dir")) : fs::path("out");
  }
  Format format() const {
    if (!o_.format.empty()) return parse_format(o_.format);
    return cfg_ ? parse_format(cfg_->str("output.format")) : Format::spt1;
  }

  void put(const std::string& rel, const std::string& bytes) {
    write_file(out_dir() / rel, bytes);
    files_[rel] = sha256_hex(bytes);
  }
  void put_tensor(const std::string& rel, const DenseTensor& T) { put(rel, encode_spt1(T)); }
  void put_matrix(const std::string& rel, const Matrix& M) { put_tensor(rel, from_matrix(M)); }
  void put_vector(const std::string& rel, const Vector& v) { put_tensor(rel, from_vector(v)); }
  void put_json(const std::string& rel, const json& j) { put(rel, j.dump(2) + "\n"); }

  void put_sequence(const std::string& dir, const SequenceData& s) {
    if (format() == Format::csv) {
      put(dir + "/sequence.csv", sequence_csv(s));
      return;
    }
    put_matrix(dir + "/x.spt1", s.x);
    put_matrix(dir + "/y.spt1", s.y);
  }

  void finish() {
    json files = json::array();
    for (const auto& [path, hash] : files_) files.push_back({{"path", path}, {"sha256", hash}});
    json m = {{"subcommand", sub_},
              {"seed", o_.seed},
              {"config_hash", cfg_ ? sha256_hex(cfg_->serialize()) : std::string()},
              {"versions",
               {{"spectral_rnn", kVersion},
                {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                              std::to_string(EIGEN_MAJOR_VERSION) + "." +
                              std::to_string(EIGEN_MINOR_VERSION)},
                {"compiler", __VERSION__}}},
              {"files", files}};
    write_file(out_dir() / "manifest.json", m.dump(2) + "\n");
    std::error_code ec;
    fs::remove(out_dir() / "error.json", ec);  // stale record from an earlier failed run
  }

  void echo_config() {
    if (cfg_) put("config.txt", cfg_->serialize());
  }

 private:
  std::string sub_;
  Options o_;
  int workers_ = 1;
  std::optional<ExperimentConfig> cfg_;
  std::map<std::string, std::string> files_;
};

// ---------------------------------------------------------------------------
// Shared pieces.

MomentOptions moment_options(const Run& r) {
  MomentOptions mo;
  mo.burn_in = r.cfg().integer("estimation.burn_in");
  mo.workers = r.workers();
  return mo;
}

GloreeOptions gloree_options(const Run& r) {
  const auto& c = r.cfg();
  GloreeOptions g;
  g.moments = moment_options(r);
  g.recover_u = c.boolean("estimation.recover_u");
  g.u_method = c.str("estimation.u_method") == "pinv" ? UMethod::pinv : UMethod::lsq;
  g.control_variates = c.boolean("estimation.control_variates");
  g.cp.rank = c.integer("decomposition.rank");
  g.cp.restarts = c.integer("decomposition.restarts");
  g.cp.iters = static_cast<int>(c.integer("decomposition.iters"));
  g.cp.tol = c.real("decomposition.tol");
  g.cp.pinv_tol = c.real("decomposition.pinv_tol");
  g.cp.seed = c.integer("decomposition.seed");
  g.cp.workers = r.workers();
  g.pinv_tol = c.real("decomposition.pinv_tol");
  return g;
}

std::uint64_t data_seed(const Run& r) { return derive_seed(r.seed(), 2); }

SequenceData generate_data(const Run& r) {
  const auto& c = r.cfg();
  const MarkovChainSpec spec = build_spec(c, r.seed());
  const Matrix x = sample_markov_chain(spec, c.integer("estimation.n"), data_seed(r));
  const double noise = c.real("model.noise");
  const std::uint64_t ns = derive_seed(r.seed(), 5);
  if (c.kind() == "brnn") return brnn_forward(build_brnn(c, r.seed()), x, noise, ns);
  return rnn_forward(build_rnn(c, r.seed()), x, std::nullopt, noise, ns);
}

SequenceData input_data(const Run& r) {
  if (!r.opts().data.empty()) {
    SequenceData s = read_sequence(r.opts().data);
    require(static_cast<Index>(s.x.rows()) == r.cfg().d_x() &&
                static_cast<Index>(s.y.rows()) == r.cfg().d_y(),
            "cli", "data dimensions do not match model.d_x / model.d_y", ErrorKind::config);
    return s;
  }
  return generate_data(r);
}

void require_kind(const Run& r, const std::string& kind, const std::string& sub) {
  require(r.cfg().kind() == kind, "cli",
          sub + " needs model.kind = " + kind + " (got " + r.cfg().kind() + ")", ErrorKind::config);
}

json diagnostics_json(const std::map<std::string, double>& d) {
  json j = json::object();
  for (const auto& [k, v] : d) j[k] = std::isfinite(v) ? json(v) : json(nullptr);
  return j;
}

void put_rnn_estimate(Run& r, const RnnEstimate& e, const std::string& model) {
  r.put_matrix("estimate/A1_hat.spt1", e.A1_hat);
  r.put_matrix("estimate/A2_hat.spt1", e.A2_hat);
  if (e.U_hat.size()) r.put_matrix("estimate/U_hat.spt1", e.U_hat);
  if (e.weights.size()) r.put_vector("estimate/weights.spt1", e.weights);
  for (std::size_t k = 0; k < e.blocks.size(); ++k)
    r.put_matrix("estimate/block_" + std::to_string(k) + ".spt1", e.blocks[k]);
  r.put_json("report.json", {{"model", model},
                             {"d_h", e.A1_hat.rows()},
                             {"no_recurrence", e.no_recurrence},
                             {"directions_only", e.directions_only},
                             {"blocks_only", e.blocks_only},
                             {"diagnostics", diagnostics_json(e.diagnostics)}});
}

// ---------------------------------------------------------------------------
// Subcommands.

void cmd_generate(Run& r) {
  r.load_config(true);
  r.echo_config();
  const auto& c = r.cfg();
  if (c.kind() == "brnn") {
    const BrnnParams p = build_brnn(c, r.seed());
    r.put_matrix("truth/A1.spt1", p.A1);
    r.put_matrix("truth/U.spt1", p.U);
    r.put_matrix("truth/B1.spt1", p.B1);
    r.put_matrix("truth/V.spt1", p.V);
    r.put_matrix("truth/A2.spt1", p.A2);
  } else {
    const RnnParams p = build_rnn(c, r.seed());
    r.put_matrix("truth/A1.spt1", p.A1);
    r.put_matrix("truth/U.spt1", p.U);
    r.put_matrix("truth/A2.spt1", p.A2);
  }
  r.put_sequence("data", generate_data(r));
}

void cmd_score_check(Run& r) {
  r.load_config(true);
  r.echo_config();
  const auto& c = r.cfg();
  const MarkovChainSpec spec = build_spec(c, r.seed());
  const Index d = spec.d_x();
  const Vector v = Vector::Ones(d) / std::sqrt(static_cast<double>(d));
  std::ostringstream csv;
  csv.precision(17);
  csv << "m,n,error\n";
  std::uint64_t k = 0;
  for (long long m : c.int_list("estimation.score_orders")) {
    // G = (v . x_t)^m, whose m-th derivative is m! v^(x)m
    TestFunction G;
    G.out_dim = 1;
    G.value = [v, m](const Matrix& x, Index t) {
      return Vector::Constant(1, std::pow(v.dot(x.col(t)), static_cast<double>(m)));
    };
    G.derivative = [v, m, d](const Matrix&, Index) {
      double f = 1;
      for (long long i = 2; i <= m; ++i) f *= i;
      std::vector<double> out(1);
      out[0] = f;
      for (long long o = 0; o < m; ++o) {
        std::vector<double> next;
        next.reserve(out.size() * d);
        for (double a : out)
          for (Index i = 0; i < d; ++i) next.push_back(a * v(i));
        out.swap(next);
      }
      return out;
    };
    for (long long n : c.int_list("estimation.n_grid")) {
      const auto res = stein_check(spec, G, static_cast<int>(m), n, derive_seed(r.seed(), 10 + k++),
                                   r.workers());
      csv << m << ',' << n << ',' << res.error << '\n';
    }
  }
  std::cout << csv.str();
  r.put("score_check.csv", csv.str());
}

void cmd_moments(Run& r) {
  r.load_config(true);
  r.echo_config();
  const auto& c = r.cfg();
  const MarkovChainSpec spec = build_spec(c, r.seed());
  const SequenceData data = input_data(r);
  const MomentOptions mo = moment_options(r);
  auto put = [&](const std::string& stem, const MomentTensor& m) {
    r.put_tensor("moments/" + stem + ".spt1", m.value);
    r.put_json("moments/" + stem + ".meta.json", moment_meta(m));
  };
  const std::string kind = c.kind();
  if (kind == "linear") {
    for (Index k = 0; k <= static_cast<Index>(c.integer("estimation.lags")); ++k)
      put("s1_lag" + std::to_string(k),
          cross_moment(data, spec, MomentRequest::s1(static_cast<int>(k)), mo));
    return;
  }
  if (kind == "scalar") {
    put("s3", cross_moment_s3_scalar(data, spec, mo));
    return;
  }
  put("s2", cross_moment_s2(data, spec, mo));
  if (c.boolean("estimation.recover_u") && c.l() == 2) {
    ControlVariateOptions cv;
    cv.causal_outputs = kind != "brnn";
    const auto req = MomentRequest::s4(-1);
    const bool use_cv = c.boolean("estimation.control_variates") &&
                        control_variate_count(spec.d_x(), c.d_y(), 4, -1, cv) <= cv.max_features;
    put("s4_prev", use_cv ? cross_moment_cv(data, spec, req, mo, cv)
                          : cross_moment(data, spec, req, mo));
  }
}

void cmd_decompose(Run& r) {
  r.load_config(false);
  const auto& o = r.opts();
  require(!o.tensor.empty(), "cli", "decompose needs --tensor PATH", ErrorKind::config);
  DenseTensor T = read_spt1(o.tensor);
  if (T.order() != 3) {
    // moment tensors of higher order are decomposed in their reshaped form
    require(T.order() == 4, "cli", "decompose needs an order-3 (or reshapeable order-4) tensor",
            ErrorKind::config);
    T = DenseTensor({T.dims[0], T.dims[1], T.dims[2] * T.dims[3]}, T.data);
  }
  std::optional<Matrix> M1;
  if (!o.m1.empty()) M1 = read_matrix(o.m1);
  CpOptions cp;
  if (r.has_config()) cp = gloree_options(r).cp;
  if (o.rank >= 0) cp.rank = o.rank;
  cp.workers = r.workers();
  const CpDecomposition d = decompose(T, M1, cp);
  r.echo_config();
  r.put_matrix("factors/R1.spt1", d.R1);
  r.put_matrix("factors/R2.spt1", d.R2);
  r.put_matrix("factors/R3.spt1", d.R3);
  r.put_vector("factors/weights.spt1", d.weights);
  std::vector<double> w(d.weights.data(), d.weights.data() + d.weights.size());
  r.put_json("decompose_report.json", {{"rank", d.rank},
                                       {"weights", w},
                                       {"residual", d.residual},
                                       {"iterations", d.iterations},
                                       {"converged", d.converged},
                                       {"path", d.path}});
}

void cmd_train(Run& r) {
  r.load_config(true);
  require_kind(r, "rnn", "train");
  r.echo_config();
  const auto& c = r.cfg();
  const MarkovChainSpec spec = build_spec(c, r.seed());
  const SequenceData data = input_data(r);
  const RnnEstimate e = c.l() == 2 ? gloree_quadratic(data, spec, c.d_h(), gloree_options(r))
                                   : gloree_general(data, spec, c.d_h(), c.l(), gloree_options(r));
  put_rnn_estimate(r, e, "rnn");
}

void cmd_train_brnn(Run& r) {
  r.load_config(true);
  require_kind(r, "brnn", "train-brnn");
  r.echo_config();
  const auto& c = r.cfg();
  require(c.l() == 2, "cli", "model.l: BRNN training supports l = 2", ErrorKind::config);
  const MarkovChainSpec spec = build_spec(c, r.seed());
  const BrnnEstimate e = gloree_brnn(input_data(r), spec, c.d_h(), gloree_options(r));
  r.put_matrix("estimate/A1_hat.spt1", e.A1_hat);
  r.put_matrix("estimate/B1_hat.spt1", e.B1_hat);
  r.put_matrix("estimate/U_hat.spt1", e.U_hat);
  r.put_matrix("estimate/V_hat.spt1", e.V_hat);
  r.put_matrix("estimate/A2_hat.spt1", e.A2_hat);
  r.put_vector("estimate/weights.spt1", e.weights);
  r.put_json("report.json", {{"model", "brnn"},
                             {"d_h", c.d_h()},
                             {"forward_rank", e.forward_rank},
                             {"backward_rank", e.backward_rank},
                             {"no_recurrence", e.no_recurrence},
                             {"diagnostics", diagnostics_json(e.diagnostics)}});
}

void cmd_train_scalar(Run& r) {
  r.load_config(true);
  require_kind(r, "scalar", "train-scalar");
  r.echo_config();
  const auto& c = r.cfg();
  const MarkovChainSpec spec = build_spec(c, r.seed());
  put_rnn_estimate(r, gloree_scalar(input_data(r), spec, c.d_h(), c.l(), gloree_options(r)),
                   "scalar");
}

void cmd_train_linear(Run& r) {
  r.load_config(true);
  require_kind(r, "linear", "train-linear");
  r.echo_config();
  const auto& c = r.cfg();
  const MarkovChainSpec spec = build_spec(c, r.seed());
  std::optional<Matrix> A1;
  if (!r.opts().truth.empty()) A1 = read_matrix(fs::path(r.opts().truth) / "A1.spt1");
  put_rnn_estimate(r,
                   gloree_linear(input_data(r), spec, c.integer("estimation.lags"), A1,
                                 moment_options(r)),
                   "linear");
}

void cmd_eval(Run& r) {
  r.load_config(false);
  const auto& o = r.opts();
  require(!o.truth.empty(), "cli", "ground truth required for alignment", ErrorKind::config);
  require(!o.estimate.empty(), "cli", "eval needs --estimate DIR", ErrorKind::config);
  const fs::path t = o.truth, e = fs::path(o.estimate);
  require(fs::exists(t / "A1.spt1"), "cli", "ground truth required for alignment",
          ErrorKind::config);
  const int l = r.has_config() ? r.cfg().l() : 2;
  AlignOptions ao;
  ao.signs = l % 2 == 0 ? SignSymmetry::joint : SignSymmetry::none;
  auto opt_matrix = [](const fs::path& p) { return fs::exists(p) ? read_matrix(p) : Matrix(); };

  json rep = json::object();
  std::ostringstream csv;
  csv.precision(17);
  csv << "part,matrix,row,error\n";
  struct Part {
    json rep;
    std::string csv;
    double max_error = 0;
  };
  auto one = [&](const std::string& part, const Matrix& A1, const Matrix& U, const Matrix& A2,
                 const Matrix& A1h, const Matrix& Uh, const Matrix& A2h) {
    RnnParams truth{A1, U.size() ? U : Matrix::Zero(A1.rows(), A1.rows()), A2, Activation{l, {}}};
    if (l >= 2) canonicalize(truth);
    const bool with_u = Uh.size() > 0 && U.size() > 0;
    const auto rr = align(A1h, A2h, with_u ? Uh : Matrix(), truth.A1, truth.A2,
                          with_u ? truth.U : Matrix(), ao);
    Part p;
    p.max_error = rr.max_error;
    p.rep = {{"max_error", rr.max_error},
             {"median_error", rr.median_error},
             {"permutation", rr.permutation},
             {"signs", rr.signs},
             {"sigma_min_A1", rr.sigma_min_A1},
             {"sigma_min_A2", rr.sigma_min_A2},
             {"sigma_min_U", rr.sigma_min_U}};
    std::ostringstream os;
    os.precision(17);
    for (const auto& [m, v] : rr.per_row_errors) {
      p.rep["per_row_errors"][m] = v;
      for (std::size_t i = 0; i < v.size(); ++i) os << part << ',' << m << ',' << i << ',' << v[i] << '\n';
    }
    p.csv = os.str();
    return p;
  };
  const Matrix A2 = read_matrix(t / "A2.spt1"), A2h = read_matrix(e / "A2_hat.spt1");
  if (fs::exists(t / "B1.spt1")) {
    // Without recurrence the two halves are interchangeable; keep the better
    // of the two assignments.
    const Index dh = read_matrix(t / "A1.spt1").rows();
    const Matrix A1 = read_matrix(t / "A1.spt1"), B1 = read_matrix(t / "B1.spt1");
    const Matrix U = opt_matrix(t / "U.spt1"), V = opt_matrix(t / "V.spt1");
    const Matrix A1h = read_matrix(e / "A1_hat.spt1"), B1h = read_matrix(e / "B1_hat.spt1");
    const Matrix Uh = opt_matrix(e / "U_hat.spt1"), Vh = opt_matrix(e / "V_hat.spt1");
    const Matrix Fh = A2h.topRows(dh), Bh = A2h.bottomRows(dh);
    Part f = one("forward", A1, U, A2.topRows(dh), A1h, Uh, Fh);
    Part b = one("backward", B1, V, A2.bottomRows(dh), B1h, Vh, Bh);
    Part fs_ = one("forward", A1, U, A2.topRows(dh), B1h, Vh, Bh);
    Part bs = one("backward", B1, V, A2.bottomRows(dh), A1h, Uh, Fh);
    const bool swap = std::max(fs_.max_error, bs.max_error) < std::max(f.max_error, b.max_error);
    if (swap) {
      f = fs_;
      b = bs;
    }
    rep["forward"] = f.rep;
    rep["backward"] = b.rep;
    rep["halves_swapped"] = swap;
    csv << f.csv << b.csv;
  } else {
    const Part p = one("rnn", read_matrix(t / "A1.spt1"), opt_matrix(t / "U.spt1"), A2,
                       read_matrix(e / "A1_hat.spt1"), opt_matrix(e / "U_hat.spt1"), A2h);
    rep["rnn"] = p.rep;
    csv << p.csv;
  }
  r.echo_config();
  r.put_json("eval.json", rep);
  r.put("eval.csv", csv.str());
  std::cout << rep.dump(2) << "\n";
}

void cmd_sweep(Run& r) {
  r.load_config(true);
  require_kind(r, "rnn", "sweep");
  r.echo_config();
  const auto& c = r.cfg();
  require(c.l() == 2, "cli", "model.l: the sweep runs the quadratic pipeline", ErrorKind::config);
  SweepConfig s;
  s.truth = build_rnn(c, r.seed());
  s.spec = build_spec(c, r.seed());
  for (auto n : c.int_list("estimation.n_grid")) s.n_grid.push_back(n);
  for (auto v : c.int_list("estimation.seeds")) s.seeds.push_back(derive_seed(r.seed(), 100 + v));
  s.gloree = gloree_options(r);
  s.gloree.moments.workers = 1;
  s.gloree.cp.workers = 1;
  s.config_hash = sha256_hex(c.serialize());
  s.workers = r.workers();
  const SweepResult res = sample_sweep(s);
  r.put("sweep.csv", res.csv());
  json med = json::array();
  for (double m : res.median_max_error) med.push_back(std::isfinite(m) ? json(m) : json(nullptr));
  r.put_json("sweep_summary.json",
             {{"slope", std::isfinite(res.slope) ? json(res.slope) : json(nullptr)},
              {"intercept", std::isfinite(res.intercept) ? json(res.intercept) : json(nullptr)},
              {"config_hash", s.config_hash},
              {"n_grid", s.n_grid},
              {"median_max_error", med},
              {"cell_errors", res.cell_errors}});
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return 2;
    case ErrorKind::numerical: return 3;
    case ErrorKind::io: return 4;
  }
  return 3;
}

const char* kind_label(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return "config";
    case ErrorKind::numerical: return "numerical";
    case ErrorKind::io: return "io";
  }
  return "numerical";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spectral training of recurrent networks from input-output moments"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* s) {
    s->add_option("--config", o.config, "Experiment config (flat dotted keys)");
    s->add_option("--seed", o.seed, "Master seed")->default_val(1);
    s->add_option("--out", o.out, "Output directory (overrides output.dir)");
    s->add_option("--set", o.sets, "Override KEY=VALUE (repeatable)")->allow_extra_args(false);
    s->add_option("--workers", o.workers, "Worker threads (default: SPECTRAL_RNN_WORKERS or CPUs)")
        ->check(CLI::PositiveNumber);
    s->add_option("--format", o.format, "Sequence format")->check(CLI::IsMember({"spt1", "csv"}));
  };
  using Fn = void (*)(Run&);
  const std::vector<std::tuple<std::string, std::string, Fn>> subs = {
      {"generate", "Sample a ground-truth model and a sequence", cmd_generate},
      {"score-check", "Stein identity errors as CSV rows (m, n, error)", cmd_score_check},
      {"moments", "Estimate cross-moment tensors", cmd_moments},
      {"decompose", "CP decomposition of an SPT1 tensor", cmd_decompose},
      {"train", "Quadratic or cubic RNN recovery", cmd_train},
      {"train-brnn", "Bidirectional RNN recovery", cmd_train_brnn},
      {"train-scalar", "Scalar-output recovery (l >= 3)", cmd_train_scalar},
      {"train-linear", "Linear RNN recovery from Toeplitz blocks", cmd_train_linear},
      {"eval", "Align an estimate against ground truth", cmd_eval},
      {"sweep", "Sample-size sweep with log-log slope", cmd_sweep},
  };
  std::string chosen;
  Fn fn = nullptr;
  for (const auto& [name, help, f] : subs) {
    CLI::App* s = app.add_subcommand(name, help);
    common(s);
    if (name == "moments" || name.rfind("train", 0) == 0)
      s->add_option("--data", o.data, "Sequence directory (default: generate from config)");
    if (name == "decompose") {
      s->add_option("--tensor", o.tensor, "Order-3 SPT1 tensor");
      s->add_option("--m1", o.m1, "Optional first-moment matrix for symmetrization");
      s->add_option("--rank", o.rank, "CP rank (default: config or auto)");
    }
    if (name == "eval" || name == "train-linear")
      s->add_option("--truth", o.truth, "Ground-truth directory (A1.spt1, U.spt1, A2.spt1, ...)");
    if (name == "eval") s->add_option("--estimate", o.estimate, "Estimate directory");
    s->callback([&chosen, &fn, name = name, f = f] {
      chosen = name;
      fn = f;
    });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  std::optional<Run> run;
  try {
    run.emplace(chosen, o);
    fn(*run);
    run->finish();
    return 0;
  } catch (const Error& e) {
    const json rec = {{"error", {{"module", e.module()},
                                 {"stage", chosen},
                                 {"kind", kind_label(e.kind())},
                                 {"message", e.what()}}}};
    std::cerr << rec.dump() << "\n";
    try {
      if (run) write_file(run->out_dir() / "error.json", rec.dump(2) + "\n");
    } catch (const std::exception&) {
    }
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    const json rec = {{"error", {{"module", "cli"},
                                 {"stage", chosen},
                                 {"kind", "numerical"},
                                 {"message", e.what()}}}};
    std::cerr << rec.dump() << "\n";
    return 3;
  }
}
