// tempo-kkt: solve | table <id> | check

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "tempo_kkt/experiments.hpp"

namespace {

using namespace tempo_kkt;

constexpr const char* kUsage =
    "usage: tempo-kkt solve [--key value ...] [--config file]\n"
    "       tempo-kkt table <T1|T3|T4|T5|T6|T7|T8|T9|Fig5> [--key value ...]\n"
    "       tempo-kkt check [--seed n]\n"
    "       tempo-kkt <command> --print_config   echo the effective configuration\n";

void print_help() {
  std::cout << kUsage << "\nkeys:\n";
  CLI::App app;
  detail::RawConfig raw;
  add_config_options(app, raw);
  for (const CLI::Option* o : app.get_options())
    std::cout << "  " << o->get_name() << "  " << o->get_description() << '\n';
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  if (args.empty() || args[0] == "-h" || args[0] == "--help") {
    print_help();
    return args.empty() ? kExitConfig : kExitOk;
  }
  const std::string cmd = args[0];
  args.erase(args.begin());
  std::string table_id;
  if (cmd == "table") {
    if (args.empty() || args[0].rfind("--", 0) == 0) throw ConfigError("table: missing table id");
    table_id = args[0];
    args.erase(args.begin());
  } else if (cmd != "solve" && cmd != "check") {
    throw ConfigError("command: '" + cmd + "' is not one of {solve,table,check}");
  }
  bool print_only = false;
  std::erase_if(args, [&](const std::string& a) { return a == "--print_config" && (print_only = true); });
  const ExperimentConfig cfg = parse_config(args);
  if (print_only) {
    std::cout << to_config_text(cfg);
    return kExitOk;
  }

  if (cmd == "solve") return solve(cfg, std::cout);
  if (cmd == "check") return run_checks(cfg, std::cout) ? kExitOk : kExitSolver;

  const CsvTable t = run_table(table_id, cfg, &std::cerr);
  const std::string path = cfg.output.empty() ? table_id + ".csv" : cfg.output;
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  t.write(os);
  std::cerr << "wrote " << path << " (" << t.rows.size() << " rows)\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  tempo_kkt::tune_allocator();
  try {
    return run(argc, argv);
  } catch (const tempo_kkt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return tempo_kkt::kExitConfig;
  } catch (const tempo_kkt::NewtonDivergence& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return tempo_kkt::kExitDivergence;
  } catch (const tempo_kkt::NonFiniteValue& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return tempo_kkt::kExitDivergence;
  } catch (const tempo_kkt::Error& e) {
    std::cerr << "solver error: " << e.what() << '\n';
    return tempo_kkt::kExitSolver;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return tempo_kkt::kExitSolver;
  }
}
