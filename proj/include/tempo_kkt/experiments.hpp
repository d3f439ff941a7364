#pragma once

/// \file experiments.hpp
/// \brief Experiment configuration, table sweeps written as CSV, single solver
///        runs with artifacts, and the self-check battery behind `tempo-kkt`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "errors.hpp"
#include "kkt.hpp"
#include "multigrid.hpp"
#include "problems.hpp"
#include "smoothers.hpp"
#include "sqp.hpp"
#include "timedisc.hpp"

namespace tempo_kkt {

enum class ProblemKind { vanderpol, burgers, heat };

inline const char* to_string(ProblemKind k) {
  switch (k) {
    case ProblemKind::vanderpol: return "vanderpol";
    case ProblemKind::burgers: return "burgers";
    case ProblemKind::heat: return "heat";
  }
  return "?";
}

inline const char* to_string(KrylovKind k) { return k == KrylovKind::gmres ? "gmres" : "fgmres"; }

/// \brief Every knob varied by the experiments. Optional fields fall back to a
/// per-problem (or per-table) default when unset.
struct ExperimentConfig {
  ProblemKind problem = ProblemKind::vanderpol;
  std::size_t ns = 64;
  std::size_t levels = 0;  ///< 0: coarsen down to the problem's coarsest grid
  CycleKind cycle = CycleKind::w;
  PrecondKind precond = PrecondKind::multigrid;
  SmootherKind smoother = SmootherKind::jacobi;
  std::size_t sweeps = 4;
  double damping = 1.0;
  double coarse_tol = 1e-6;
  KrylovKind outer = KrylovKind::fgmres;
  double tau = 1e-2;
  std::optional<double> theta;  ///< vanderpol and heat 1, burgers 0.5
  double nu = 1e-2;
  double alpha = 0.1;
  std::optional<std::size_t> n_elems;  ///< burgers 128; heat cells 16
  std::uint64_t seed = 0;
  std::string output;
  std::vector<std::size_t> ns_list;  ///< table rows; empty means the table's own sweep
  std::size_t max_sqp_iters = 50;
  double gtol = 1e-6;
  double ctol = 1e-6;
};

namespace detail {

template <class E>
E parse_enum(const std::string& key, const std::string& value, std::initializer_list<std::pair<const char*, E>> opts) {
  std::string domain;
  for (const auto& [name, e] : opts) {
    if (value == name) return e;
    domain += domain.empty() ? name : std::string(",") + name;
  }
  throw ConfigError(key + ": '" + value + "' is not one of {" + domain + "}");
}

inline std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.15g", x);
  return buf;
}

struct RawConfig {
  std::string problem = "vanderpol", cycle = "w", precond = "mg", smoother = "jacobi", outer = "fgmres";
  std::size_t ns = 64, levels = 0, sweeps = 4, max_sqp_iters = 50;
  double damping = 1.0, coarse_tol = 1e-6, tau = 1e-2, nu = 1e-2, alpha = 0.1, gtol = 1e-6, ctol = 1e-6;
  std::optional<double> theta;
  std::optional<std::size_t> n_elems;
  std::uint64_t seed = 0;
  std::string output;
  std::vector<std::size_t> ns_list;
};

}  // namespace detail

/// \brief Registers every config key as `--key` on `app`, plus `--config <file>`
/// for flat `key = value` files. Flags given on the command line win over the file.
inline void add_config_options(CLI::App& app, detail::RawConfig& raw) {
  app.set_config("--config", "", "flat key = value file; # starts a comment");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.add_option("--problem", raw.problem, "vanderpol | burgers | heat");
  app.add_option("--ns", raw.ns, "number of time steps");
  app.add_option("--levels", raw.levels, "multigrid levels, 0 derives them");
  app.add_option("--cycle", raw.cycle, "v | f | w");
  app.add_option("--precond", raw.precond, "mg | jacobi | fgs | bgs | sgs | none");
  app.add_option("--smoother", raw.smoother, "multigrid smoother: jacobi | fgs | bgs | sgs");
  app.add_option("--sweeps", raw.sweeps, "smoother sweeps per pre/post smoothing");
  app.add_option("--damping", raw.damping, "Jacobi damping factor");
  app.add_option("--coarse_tol", raw.coarse_tol, "relative tolerance of the coarse-grid solve");
  app.add_option("--outer", raw.outer, "gmres | fgmres");
  app.add_option("--tau", raw.tau, "nominal linear solver tolerance");
  app.add_option("--theta", raw.theta, "theta-method parameter");
  app.add_option("--nu", raw.nu, "Burgers viscosity");
  app.add_option("--alpha", raw.alpha, "control penalty");
  app.add_option("--n_elems", raw.n_elems, "spatial elements (Burgers) or cells (heat)");
  app.add_option("--seed", raw.seed, "seed for randomized probes");
  app.add_option("--output", raw.output, "output path (prefix for solve, CSV file for table)");
  app.add_option("--ns_list", raw.ns_list, "table rows, e.g. 64,128")->delimiter(',');
  app.add_option("--max_sqp_iters", raw.max_sqp_iters, "SQP iteration cap");
  app.add_option("--gtol", raw.gtol, "optimality tolerance");
  app.add_option("--ctol", raw.ctol, "feasibility tolerance");
}

inline void validate(const ExperimentConfig& c) {
  if (c.ns < 1) throw ConfigError("ns: expected a positive integer");
  if (c.levels > 1) {
    const std::size_t factor = std::size_t{1} << (c.levels - 1);
    if (c.levels > 30 || c.ns % factor != 0 || c.ns / factor < 2)
      throw ConfigError("levels: ns = " + std::to_string(c.ns) + " is not divisible by 2^(levels-1) = " +
                        std::to_string(c.levels > 30 ? 0 : factor) + " with at least 2 coarse steps");
  }
  for (std::size_t n : c.ns_list)
    if (n < 1) throw ConfigError("ns_list: expected positive integers");
  if (c.sweeps < 1) throw ConfigError("sweeps: expected a positive integer");
  if (!(c.damping > 0.0 && c.damping <= 2.0)) throw ConfigError("damping: expected a value in (0,2]");
  if (!(c.coarse_tol > 0.0 && c.coarse_tol < 1.0)) throw ConfigError("coarse_tol: expected a value in (0,1)");
  if (!(c.tau > 0.0 && c.tau < 1.0)) throw ConfigError("tau: expected a value in (0,1)");
  if (c.theta && !(*c.theta >= 0.0 && *c.theta <= 1.0)) throw ConfigError("theta: expected a value in [0,1]");
  if (!(c.nu > 0.0)) throw ConfigError("nu: expected a positive value");
  if (!(c.alpha > 0.0)) throw ConfigError("alpha: expected a positive value");
  if (c.n_elems && *c.n_elems < 2) throw ConfigError("n_elems: expected an integer >= 2");
  if (!(c.gtol > 0.0) || !(c.ctol > 0.0)) throw ConfigError("gtol, ctol: expected positive values");
}

inline ExperimentConfig finalize(const detail::RawConfig& r) {
  ExperimentConfig c;
  c.problem = detail::parse_enum<ProblemKind>(
      "problem", r.problem,
      {{"vanderpol", ProblemKind::vanderpol}, {"burgers", ProblemKind::burgers}, {"heat", ProblemKind::heat}});
  c.cycle = detail::parse_enum<CycleKind>("cycle", r.cycle,
                                          {{"v", CycleKind::v}, {"f", CycleKind::f}, {"w", CycleKind::w}});
  c.precond = detail::parse_enum<PrecondKind>("precond", r.precond,
                                              {{"mg", PrecondKind::multigrid},
                                               {"jacobi", PrecondKind::jacobi},
                                               {"fgs", PrecondKind::fgs},
                                               {"bgs", PrecondKind::bgs},
                                               {"sgs", PrecondKind::sgs},
                                               {"none", PrecondKind::none}});
  c.smoother = detail::parse_enum<SmootherKind>("smoother", r.smoother,
                                                {{"jacobi", SmootherKind::jacobi},
                                                 {"fgs", SmootherKind::fgs},
                                                 {"bgs", SmootherKind::bgs},
                                                 {"sgs", SmootherKind::sgs}});
  c.outer = detail::parse_enum<KrylovKind>("outer", r.outer,
                                           {{"gmres", KrylovKind::gmres}, {"fgmres", KrylovKind::fgmres}});
  c.ns = r.ns;
  c.levels = r.levels;
  c.sweeps = r.sweeps;
  c.damping = r.damping;
  c.coarse_tol = r.coarse_tol;
  c.tau = r.tau;
  c.theta = r.theta;
  c.nu = r.nu;
  c.alpha = r.alpha;
  c.n_elems = r.n_elems;
  c.seed = r.seed;
  c.output = r.output;
  c.ns_list = r.ns_list;
  c.max_sqp_iters = r.max_sqp_iters;
  c.gtol = r.gtol;
  c.ctol = r.ctol;
  validate(c);
  return c;
}

/// \brief Parses command-line style arguments (program name excluded). Any
/// parse failure, unknown key or out-of-domain value raises ConfigError.
inline ExperimentConfig parse_config(std::vector<std::string> args) {
  CLI::App app{"tempo-kkt configuration"};
  detail::RawConfig raw;
  add_config_options(app, raw);
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return finalize(raw);
}

/// \brief The effective configuration in the config-file syntax.
inline std::string to_config_text(const ExperimentConfig& c) {
  std::ostringstream os;
  os << "problem = " << to_string(c.problem) << '\n'
     << "ns = " << c.ns << '\n'
     << "levels = " << c.levels << '\n'
     << "cycle = " << to_string(c.cycle) << '\n'
     << "precond = " << to_string(c.precond) << '\n'
     << "smoother = " << to_string(c.smoother) << '\n'
     << "sweeps = " << c.sweeps << '\n'
     << "damping = " << detail::fmt(c.damping) << '\n'
     << "coarse_tol = " << detail::fmt(c.coarse_tol) << '\n'
     << "outer = " << to_string(c.outer) << '\n'
     << "tau = " << detail::fmt(c.tau) << '\n';
  if (c.theta) os << "theta = " << detail::fmt(*c.theta) << '\n';
  os << "nu = " << detail::fmt(c.nu) << '\n' << "alpha = " << detail::fmt(c.alpha) << '\n';
  if (c.n_elems) os << "n_elems = " << *c.n_elems << '\n';
  os << "seed = " << c.seed << '\n'
     << "max_sqp_iters = " << c.max_sqp_iters << '\n'
     << "gtol = " << detail::fmt(c.gtol) << '\n'
     << "ctol = " << detail::fmt(c.ctol) << '\n';
  if (!c.output.empty()) os << "output = \"" << c.output << "\"\n";
  if (!c.ns_list.empty()) {
    os << "ns_list = [";
    for (std::size_t i = 0; i < c.ns_list.size(); ++i) os << (i ? "," : "") << c.ns_list[i];
    os << "]\n";
  }
  return os.str();
}

/// \brief A problem on its time grid plus the coarsest multigrid grid size.
struct Instance {
  ProblemSpec spec;
  TimeGrid grid;
  std::size_t coarsest_steps = 16;
};

inline Instance make_instance(const ExperimentConfig& c) {
  Instance in;
  switch (c.problem) {
    case ProblemKind::vanderpol: {
      VanDerPolConfig v;
      v.alpha = c.alpha;
      v.theta = c.theta.value_or(1.0);
      in.grid = TimeGrid::uniform(v.t_final, c.ns);
      in.spec = build_vanderpol(v, in.grid);
      in.coarsest_steps = 16;
      break;
    }
    case ProblemKind::burgers: {
      BurgersConfig b;
      b.nu = c.nu;
      b.alpha = c.alpha;
      b.n_elems = c.n_elems.value_or(128);
      b.theta = c.theta.value_or(0.5);
      in.grid = TimeGrid::uniform(b.t_final, c.ns);
      in.spec = build_burgers(b, in.grid);
      in.coarsest_steps = 8;
      break;
    }
    case ProblemKind::heat: {
      HeatNeumannConfig h;
      h.n_cells = c.n_elems.value_or(h.n_cells);
      h.theta = c.theta.value_or(1.0);
      in.grid = TimeGrid::uniform(h.t_final, c.ns);
      in.spec = build_heat_neumann(h, in.grid);
      in.coarsest_steps = 8;
      break;
    }
  }
  return in;
}

inline std::size_t effective_levels(const ExperimentConfig& c, const Instance& in) {
  if (c.precond != PrecondKind::multigrid) return 1;
  return c.levels ? c.levels : levels_for(c.ns, in.coarsest_steps);
}

inline SolverConfig solver_config(const ExperimentConfig& c, const Instance& in) {
  SolverConfig s;
  s.prec = c.precond;
  s.krylov = c.outer;
  s.mg.cycle = c.cycle;
  s.mg.smoother = {c.smoother, c.sweeps, c.damping};
  s.mg.coarse_tol = c.coarse_tol;
  s.coarsest_steps = in.coarsest_steps;
  s.levels = c.levels;
  return s;
}

inline SqpConfig sqp_config(const ExperimentConfig& c) {
  SqpConfig s;
  s.tau = c.tau;
  s.gtol = c.gtol;
  s.ctol = c.ctol;
  s.max_iters = c.max_sqp_iters;
  return s;
}

/// \brief Counters of one SQP run, shared by `solve` and the table rows.
struct RunSummary {
  bool converged = false;
  std::size_t levels = 1;
  std::size_t sqp_iters = 0;
  std::size_t cg_iters = 0;
  std::size_t ls_calls = 0;
  std::size_t ls_total = 0;
  double ls_average = 0.0;
  double coarse_average = 0.0;
  double optimality = 0.0;
  double feasibility = 0.0;
  double seconds = 0.0;
};

inline RunSummary summarize(const SqpResult& r, std::size_t levels, double seconds) {
  RunSummary s;
  s.converged = r.converged;
  s.levels = levels;
  s.sqp_iters = r.state.iteration;
  s.cg_iters = r.total_cg();
  s.ls_calls = r.total_ls_calls();
  s.ls_total = r.total_ls_iters();
  s.ls_average = r.ls_average();
  s.coarse_average = r.coarse_average();
  s.optimality = r.state.optimality;
  s.feasibility = r.state.feasibility;
  s.seconds = seconds;
  return s;
}

inline std::pair<RunSummary, SqpResult> run_sqp(const ExperimentConfig& c, std::ostream* log = nullptr) {
  validate(c);
  const Instance in = make_instance(c);
  SqpConfig sc = sqp_config(c);
  sc.log = log;
  const auto t0 = std::chrono::steady_clock::now();
  SqpResult res = sqp_solve(in.spec, in.grid, sc, solver_config(c, in));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  RunSummary s = summarize(res, effective_levels(c, in), secs);
  return {s, std::move(res)};
}

/// \brief Header plus rows; every row ends with a status cell.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void write(std::ostream& os) const {
    auto line = [&os](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
      os << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
  }
};

namespace detail {

// Commas and newlines would break the CSV row.
inline std::string status_text(const std::string& s) {
  std::string out = s;
  for (char& ch : out)
    if (ch == ',' || ch == '\n' || ch == '\r') ch = ';';
  return out;
}

inline std::string count(std::size_t n) { return std::to_string(n); }

inline void add_status(std::string& status, const std::string& tag, const std::string& what) {
  status += (status.empty() ? "" : " ") + tag + ":" + status_text(what);
}

// Runs one SQP and appends its CG/LS/SQP cells (empty on failure).
inline void sqp_cells(const ExperimentConfig& c, const std::string& tag, std::vector<std::string>& cells,
                      std::string& status, std::ostream* log, std::size_t* levels = nullptr) {
  try {
    const RunSummary s = run_sqp(c).first;
    if (levels) *levels = s.levels;
    cells.push_back(count(s.cg_iters));
    cells.push_back(fmt(s.ls_average));
    cells.push_back(count(s.sqp_iters));
    if (!s.converged) add_status(status, tag, "not_converged");
    if (log)
      *log << "  " << tag << " ns=" << c.ns << " sqp=" << s.sqp_iters << " cg=" << s.cg_iters
           << " ls=" << s.ls_average << " converged=" << s.converged << " time=" << s.seconds << "s\n";
  } catch (const Error& e) {
    cells.insert(cells.end(), 3, "");
    add_status(status, tag, e.what());
  }
}

inline std::vector<std::size_t> rows_or(const ExperimentConfig& c, std::vector<std::size_t> dflt) {
  return c.ns_list.empty() ? dflt : c.ns_list;
}

inline const std::vector<std::size_t> kMgSweep{64, 128, 256, 512, 1024, 2048};

inline ExperimentConfig with_problem(ExperimentConfig c, ProblemKind k) {
  c.problem = k;
  return c;
}

inline CsvTable cycles_table(const ExperimentConfig& base, ProblemKind k, std::ostream* log) {
  CsvTable t;
  t.header = {"Ns", "Lv", "CG_V", "LS_V", "SQP_V", "CG_F", "LS_F", "SQP_F", "CG_W", "LS_W", "SQP_W", "status"};
  for (std::size_t ns : rows_or(base, kMgSweep)) {
    ExperimentConfig c = with_problem(base, k);
    c.ns = ns;
    c.precond = PrecondKind::multigrid;
    std::vector<std::string> cells{count(ns), ""};
    std::string status;
    std::size_t levels = 0;
    for (auto [cyc, tag] : {std::pair{CycleKind::v, "V"}, {CycleKind::f, "F"}, {CycleKind::w, "W"}}) {
      c.cycle = cyc;
      sqp_cells(c, tag, cells, status, log, &levels);
    }
    if (levels) cells[1] = count(levels);
    cells.push_back(status.empty() ? "ok" : status);
    t.rows.push_back(std::move(cells));
  }
  return t;
}

inline CsvTable flat_table(const ExperimentConfig& base, ProblemKind k, std::ostream* log) {
  CsvTable t;
  t.header = {"Ns", "Lv", "LS_F", "LS_J", "LS_FGS", "LS_BGS", "LS_SGS", "status"};
  const std::pair<PrecondKind, const char*> precs[] = {{PrecondKind::multigrid, "F"},
                                                       {PrecondKind::jacobi, "J"},
                                                       {PrecondKind::fgs, "FGS"},
                                                       {PrecondKind::bgs, "BGS"},
                                                       {PrecondKind::sgs, "SGS"}};
  for (std::size_t ns : rows_or(base, kMgSweep)) {
    ExperimentConfig c = with_problem(base, k);
    c.ns = ns;
    c.cycle = CycleKind::f;
    std::vector<std::string> cells{count(ns), ""};
    std::string status;
    for (auto [prec, tag] : precs) {
      c.precond = prec;
      std::vector<std::string> three;
      std::size_t levels = 0;
      sqp_cells(c, tag, three, status, log, &levels);
      if (prec == PrecondKind::multigrid && levels) cells[1] = count(levels);
      cells.push_back(three[1]);
    }
    cells.push_back(status.empty() ? "ok" : status);
    t.rows.push_back(std::move(cells));
  }
  return t;
}

inline CsvTable coarse_tol_table(const ExperimentConfig& base, ProblemKind k, std::ostream* log) {
  CsvTable t;
  t.header = {"Ns",           "Tol",       "LSTot_GMRES",    "LS_GMRES", "LSCoarse_GMRES",
              "LSTot_FGMRES", "LS_FGMRES", "LSCoarse_FGMRES", "status"};
  for (double tol : {1e-10, 1e-8, 1e-6, 1e-4, 1e-2}) {
    ExperimentConfig c = with_problem(base, k);
    c.precond = PrecondKind::multigrid;
    c.coarse_tol = tol;
    std::vector<std::string> cells{count(c.ns), fmt(tol)};
    std::string status;
    for (auto [outer, tag] : {std::pair{KrylovKind::gmres, "GMRES"}, {KrylovKind::fgmres, "FGMRES"}}) {
      c.outer = outer;
      try {
        const RunSummary s = run_sqp(c).first;
        cells.push_back(count(s.ls_total));
        cells.push_back(fmt(s.ls_average));
        cells.push_back(fmt(s.coarse_average));
        if (!s.converged) add_status(status, tag, "not_converged");
        if (log)
          *log << "  " << tag << " tol=" << tol << " lstot=" << s.ls_total << " ls=" << s.ls_average
               << " coarse=" << s.coarse_average << " time=" << s.seconds << "s\n";
      } catch (const Error& e) {
        cells.insert(cells.end(), 3, "");
        add_status(status, tag, e.what());
      }
    }
    cells.push_back(status.empty() ? "ok" : status);
    t.rows.push_back(std::move(cells));
  }
  return t;
}

inline CsvTable viscosity_table(const ExperimentConfig& base, std::ostream* log) {
  CsvTable t;
  t.header = {"Ns", "Lv", "CG_nu1e-1", "LS_nu1e-1", "SQP_nu1e-1", "CG_nu1e-2", "LS_nu1e-2", "SQP_nu1e-2",
              "CG_nu1e-3", "LS_nu1e-3", "SQP_nu1e-3", "status"};
  for (std::size_t ns : rows_or(base, {64, 128, 256, 512})) {
    ExperimentConfig c = with_problem(base, ProblemKind::burgers);
    c.ns = ns;
    c.precond = PrecondKind::multigrid;
    c.theta = base.theta.value_or(1.0);
    c.n_elems = base.n_elems.value_or(200);
    std::vector<std::string> cells{count(ns), ""};
    std::string status;
    std::size_t levels = 0;
    for (auto [nu, tag] : {std::pair{1e-1, "nu1e-1"}, {1e-2, "nu1e-2"}, {1e-3, "nu1e-3"}}) {
      c.nu = nu;
      sqp_cells(c, tag, cells, status, log, &levels);
    }
    if (levels) cells[1] = count(levels);
    cells.push_back(status.empty() ? "ok" : status);
    t.rows.push_back(std::move(cells));
  }
  return t;
}

}  // namespace detail

/// \brief Augmented systems met along an SQP run, each paired with two fixed
/// right-hand sides: (grad f, 0) and (0, c_x Q^{-1} grad f + c).
struct SystemSample {
  std::vector<Iterate> points;
};

/// \brief Points accepted by an SGS-preconditioned SQP run on `c`.
inline SystemSample sample_points(const ExperimentConfig& c) {
  ExperimentConfig s = c;
  s.precond = PrecondKind::sgs;
  const Instance in = make_instance(s);
  SqpConfig sc = sqp_config(s);
  SystemSample out;
  sc.on_point = [&out](const Iterate& it) { out.points.push_back(it); };
  sqp_solve(in.spec, in.grid, sc, solver_config(s, in));
  return out;
}

struct SampleStats {
  std::size_t solves = 0;
  std::size_t iters = 0;
  std::size_t capped = 0;
  std::size_t breakdowns = 0;  ///< solves that stopped on a Krylov breakdown; not in the average
  double average() const { return solves ? static_cast<double>(iters) / static_cast<double>(solves) : 0.0; }
};

/// \brief Solves both right-hand sides at every sampled point with the given
/// Krylov method and preconditioner to relative residual `rel`.
inline SampleStats solve_samples(const ExperimentConfig& c, const SystemSample& sample, PrecondKind prec,
                                 KrylovKind krylov, double rel, std::size_t max_iters) {
  ExperimentConfig s = c;
  s.precond = prec;
  s.outer = krylov;
  const Instance in = make_instance(s);
  SolverConfig scfg = solver_config(s, in);
  scfg.max_iters = max_iters;
  const SqpProblem prob(in.spec, in.grid);
  SampleStats st;
  for (const Iterate& it : sample.points) {
    const SqpPoint pt = evaluate_point(prob, it, scfg);
    const Vector b1 = pt.grad;
    Vector b2 = pt.jac(prob, prob.apply_q_inverse(pt.grad));
    axpy_inplace(1.0, pt.c, b2);
    for (const Vector* b : {&b1, static_cast<const Vector*>(&b2)}) {
      StepStats ss;
      try {
        const SolveResult r = pt.sys->solve_relative(*b, rel, ss);
        ++st.solves;
        st.iters += r.report.iterations;
        if (!r.report.converged) ++st.capped;
      } catch (const Breakdown&) {
        ++st.breakdowns;
      }
    }
  }
  return st;
}

namespace detail {

inline CsvTable preconditioner_table(const ExperimentConfig& base, std::ostream* log) {
  CsvTable t;
  t.header = {"Ns", "LS_ODE_I", "LS_ODE_FGS", "LS_ODE_BGS", "LS_ODE_SGS",
              "LS_PDE_I", "LS_PDE_FGS", "LS_PDE_BGS", "LS_PDE_SGS", "status"};
  const std::pair<PrecondKind, const char*> precs[] = {
      {PrecondKind::none, "I"}, {PrecondKind::fgs, "FGS"}, {PrecondKind::bgs, "BGS"}, {PrecondKind::sgs, "SGS"}};
  for (std::size_t ns : rows_or(base, {8, 16, 32, 64, 128, 256})) {
    std::vector<std::string> cells{count(ns)};
    std::string status;
    for (auto [k, ptag] : {std::pair{ProblemKind::vanderpol, "ODE"}, {ProblemKind::burgers, "PDE"}}) {
      ExperimentConfig c = with_problem(base, k);
      c.ns = ns;
      c.levels = 0;
      try {
        const SystemSample sample = sample_points(c);
        for (auto [prec, tag] : precs) {
          const SampleStats s = solve_samples(c, sample, prec, KrylovKind::gmres, 1e-10, 401);
          cells.push_back(fmt(s.average()));
          if (log)
            *log << "  " << ptag << " " << tag << " ns=" << ns << " systems=" << s.solves
                 << " avg=" << s.average() << " capped=" << s.capped << " breakdowns=" << s.breakdowns << '\n';
          if (s.breakdowns) add_status(status, std::string(ptag) + "_" + tag, "breakdowns=" + count(s.breakdowns));
        }
      } catch (const Error& e) {
        cells.resize(1 + (k == ProblemKind::vanderpol ? 4 : 8), "");
        add_status(status, ptag, e.what());
      }
    }
    cells.push_back(status.empty() ? "ok" : status);
    t.rows.push_back(std::move(cells));
  }
  return t;
}

inline CsvTable heat_table(const ExperimentConfig& base, std::ostream* log) {
  CsvTable t;
  t.header = {"N", "precond", "iteration", "relres", "status"};
  for (std::size_t n : rows_or(base, {3, 10, 15, 30})) {
    for (PrecondKind prec : {PrecondKind::none, PrecondKind::fgs, PrecondKind::bgs, PrecondKind::sgs}) {
      ExperimentConfig c = with_problem(base, ProblemKind::heat);
      c.ns = n;
      c.levels = 0;
      c.precond = prec;
      c.outer = KrylovKind::gmres;
      try {
        const Instance in = make_instance(c);
        const SqpProblem prob(in.spec, in.grid);
        const Trajectory traj =
            forward_solve(in.spec, std::vector<Vector>(n, Vector(in.spec.n_z, 0.0)), in.grid);
        const SqpPoint pt = evaluate_point(prob, {traj.states, traj.states, traj.controls}, solver_config(c, in));
        Vector b = axpy(1.0, pt.grad, pt.c);
        scale_inplace(-1.0, b);
        StepStats ss;
        const SolveResult r = pt.sys->solve_relative(b, 1e-10, ss);
        const std::string status = r.report.converged ? "ok" : "not_converged";
        const auto& h = r.report.residual_history;
        for (std::size_t k = 0; k < h.size(); ++k)
          t.rows.push_back({count(n), to_string(prec), count(k), fmt(h[k]), status});
        if (log) *log << "  N=" << n << " " << to_string(prec) << " iterations=" << r.report.iterations << '\n';
      } catch (const Error& e) {
        t.rows.push_back({count(n), to_string(prec), "", "", status_text(e.what())});
      }
    }
  }
  return t;
}

}  // namespace detail

inline const std::vector<std::string>& table_ids() {
  static const std::vector<std::string> ids{"T1", "T3", "T4", "T5", "T6", "T7", "T8", "T9", "Fig5"};
  return ids;
}

/// \brief Runs one table sweep. Rows are computed in order; a failing row keeps
/// its status message and the sweep continues.
inline CsvTable run_table(const std::string& id, const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  validate(cfg);
  if (id == "T1") return detail::preconditioner_table(cfg, log);
  if (id == "T3") return detail::cycles_table(cfg, ProblemKind::vanderpol, log);
  if (id == "T4") return detail::flat_table(cfg, ProblemKind::vanderpol, log);
  if (id == "T5") return detail::coarse_tol_table(cfg, ProblemKind::vanderpol, log);
  if (id == "T6") return detail::cycles_table(cfg, ProblemKind::burgers, log);
  if (id == "T7") return detail::flat_table(cfg, ProblemKind::burgers, log);
  if (id == "T8") return detail::coarse_tol_table(cfg, ProblemKind::burgers, log);
  if (id == "T9") return detail::viscosity_table(cfg, log);
  if (id == "Fig5") return detail::heat_table(cfg, log);
  std::string domain;
  for (const auto& s : table_ids()) domain += (domain.empty() ? "" : ",") + s;
  throw ConfigError("table: '" + id + "' is not one of {" + domain + "}");
}

/// \brief Keeps freed memory in the process instead of returning it to the
/// kernel. The solvers allocate and drop many large vectors per cycle, and with
/// glibc defaults each one is a fresh mmap with page faults on first touch.
inline void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

/// Exit codes of `tempo-kkt`.
enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitSolver = 3, kExitDivergence = 4 };

/// \brief Trajectory rows t, u components, z components at nodes 1..N.
inline void write_trajectory(std::ostream& os, const Iterate& it, const TimeGrid& g) {
  const std::size_t nu = it.u.empty() ? 0 : it.u.front().size(), nz = it.z.empty() ? 0 : it.z.front().size();
  os << 't';
  for (std::size_t j = 0; j < nu; ++j) os << ",u" << j + 1;
  for (std::size_t j = 0; j < nz; ++j) os << ",z" << j + 1;
  os << '\n';
  for (std::size_t i = 0; i < it.u.size(); ++i) {
    os << detail::fmt(g.node(i + 1));
    for (double x : it.u[i]) os << ',' << detail::fmt(x);
    for (double x : it.z[i]) os << ',' << detail::fmt(x);
    os << '\n';
  }
}

inline std::string summary_line(const ExperimentConfig& c, const RunSummary& s) {
  std::ostringstream os;
  os << "problem=" << to_string(c.problem) << " ns=" << c.ns << " levels=" << s.levels
     << " converged=" << (s.converged ? 1 : 0) << " sqp=" << s.sqp_iters << " cg=" << s.cg_iters
     << " ls_calls=" << s.ls_calls << " ls=" << detail::fmt(s.ls_average)
     << " optimality=" << detail::fmt(s.optimality) << " feasibility=" << detail::fmt(s.feasibility);
  return os.str();
}

/// \brief One SQP run. Writes `<output>.log` and `<output>_trajectory.csv`
/// (output defaults to `tempo_kkt_<problem>`) and prints the summary line.
/// Returns 0 when converged and kExitDivergence otherwise; errors propagate.
inline int solve(const ExperimentConfig& c, std::ostream& out) {
  validate(c);
  const std::string prefix = c.output.empty() ? std::string("tempo_kkt_") + to_string(c.problem) : c.output;
  if (const auto dir = std::filesystem::path(prefix).parent_path(); !dir.empty())
    std::filesystem::create_directories(dir);
  std::ofstream log(prefix + ".log");
  if (!log) throw Error("cannot open " + prefix + ".log for writing");
  std::istringstream echo(to_config_text(c));
  for (std::string line; std::getline(echo, line);) log << "# " << line << '\n';
  const auto [s, res] = run_sqp(c, &log);
  const std::string line = summary_line(c, s);
  log << line << '\n';
  std::ofstream traj(prefix + "_trajectory.csv");
  if (!traj) throw Error("cannot open " + prefix + "_trajectory.csv for writing");
  write_trajectory(traj, res.state.x, make_instance(c).grid);
  out << line << '\n';
  return s.converged ? kExitOk : kExitDivergence;
}

namespace detail {

inline double fd_jacobian_error(const ProblemSpec& p, CSpan u, CSpan z) {
  const DenseMatrix ju = p.f_jac_u(u, z).to_dense(), jz = p.f_jac_z(u, z).to_dense();
  const Vector f0 = p.f_eval(u, z);
  double err = 0.0, scale = std::max(ju.max_abs(), jz.max_abs());
  auto column = [&](bool wrt_u, std::size_t j) {
    Vector up(u.begin(), u.end()), zp(z.begin(), z.end()), um = up, zm = zp;
    Vector& xp = wrt_u ? up : zp;
    Vector& xm = wrt_u ? um : zm;
    const double h = 1e-6 * std::max(1.0, std::abs(xp[j]));
    xp[j] += h;
    xm[j] -= h;
    const Vector fp = p.f_eval(up, zp), fm = p.f_eval(um, zm);
    const DenseMatrix& jac = wrt_u ? ju : jz;
    for (std::size_t i = 0; i < f0.size(); ++i) err = std::max(err, std::abs((fp[i] - fm[i]) / (2 * h) - jac(i, j)));
  };
  for (std::size_t j = 0; j < u.size(); ++j) column(true, j);
  for (std::size_t j = 0; j < z.size(); ++j) column(false, j);
  return err / std::max(scale, 1.0);
}

}  // namespace detail

/// \brief Structural self-checks: block invertibility hypotheses on every level,
/// finite-difference Jacobians and transfer identities. Returns true if all pass.
inline bool run_checks(const ExperimentConfig& base, std::ostream& out) {
  bool all = true;
  auto report = [&](const std::string& name, bool ok, const std::string& detail) {
    out << (ok ? "ok   " : "FAIL ") << name << "  " << detail << '\n';
    all = all && ok;
  };
  std::mt19937_64 rng(base.seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);

  for (ProblemKind k : {ProblemKind::vanderpol, ProblemKind::burgers, ProblemKind::heat}) {
    ExperimentConfig c = detail::with_problem(base, k);
    c.ns = 32;
    c.levels = 0;
    if (k == ProblemKind::burgers) c.n_elems = 16;
    const Instance in = make_instance(c);
    try {
      const Trajectory traj =
          forward_solve(in.spec, std::vector<Vector>(c.ns, Vector(in.spec.n_z, 0.0)), in.grid);
      const auto h = build_hierarchy(in.spec, {traj.states, traj.states, traj.controls}, in.grid,
                                     levels_for(c.ns, in.coarsest_steps), MgConfig{});
      report(std::string("block invertibility ") + to_string(k), true,
             std::to_string(h->num_levels()) + " levels");
    } catch (const Error& e) {
      report(std::string("block invertibility ") + to_string(k), false, e.what());
    }
    Vector u(in.spec.n_u), z(in.spec.n_z);
    for (double& x : u) x = uni(rng);
    for (double& x : z) x = uni(rng);
    const double err = detail::fd_jacobian_error(in.spec, u, z);
    report(std::string("jacobian ") + to_string(k), err <= 1e-6, "rel err " + detail::fmt(err));
  }

  Sequence coarse(8, Vector(3));
  for (auto& v : coarse)
    for (double& x : v) x = uni(rng);
  const bool state_id = restrict_state(prolong_state(coarse)) == coarse;
  const bool control_id = restrict_control(prolong_control(coarse)) == coarse;
  report("restrict(prolong(x)) == x, states", state_id, "");
  report("restrict(prolong(x)) == x, controls", control_id, "");
  const Sequence ones(16, Vector(3, 1.0));
  report("constants preserved", restrict_state(ones) == Sequence(8, Vector(3, 1.0)) &&
                                    prolong_state(Sequence(8, Vector(3, 1.0))) == ones &&
                                    restrict_control(ones) == Sequence(8, Vector(3, 1.0)) &&
                                    prolong_control(Sequence(8, Vector(3, 1.0))) == ones,
         "");
  return all;
}

}  // namespace tempo_kkt
