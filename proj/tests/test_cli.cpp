#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "sldm/cli.hpp"

using namespace sldm::cli;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sldm-cli-test-" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string error_path(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.path();
  }
  return "<no error>";
}

std::size_t count(const std::string& haystack, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = haystack.find(needle); p != std::string::npos; p = haystack.find(needle, p + 1)) ++n;
  return n;
}

RunResult quiet_run(const std::string& sub, const fs::path& out, const std::vector<std::string>& sets = {}) {
  RunOptions opt;
  opt.subcommand = sub;
  opt.config = default_config(sub);
  for (const auto& s : sets) apply_assignment(opt.config, s);
  opt.out_dir = out;
  opt.quiet = true;
  return run(opt);
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("config errors name the key") {
    const json base = default_config("sample-toy");
    CHECK(error_path([&] { merge_config(base, json::parse(R"({"bogus": {}})")); }) == "bogus");
    CHECK(error_path([&] { merge_config(base, json::parse(R"({"sampler": {"stepz": 3}})")); }) == "sampler.stepz");
    CHECK(error_path([&] { merge_config(base, json::parse(R"({"sampler": {"steps": "ten"}})")); }) == "sampler.steps");
    CHECK(error_path([&] { merge_config(base, json::parse(R"({"sampler": {"steps": 1.5}})")); }) == "sampler.steps");
    CHECK(error_path([&] { merge_config(base, json::parse(R"({"sampler": 3})")); }) == "sampler");
    CHECK(error_path([&] { merge_config(base, json::parse(R"({"seed": -1})")); }) == "seed");

    json c = base;
    CHECK(error_path([&] { apply_assignment(c, "sampler.steps=abc"); }) == "sampler.steps");
    CHECK(error_path([&] { apply_assignment(c, "sampler.nope=1"); }) == "sampler.nope");
    CHECK(error_path([&] { apply_assignment(c, "schedule.grid=10"); }) == "schedule.grid");

    try {
      merge_config(base, json::parse(R"({"sampler": {"steps": "ten"}})"));
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("sampler.steps") != std::string::npos);
    }
  }

  TEST_CASE("config merging and typed assignment") {
    json c = default_config("sample-toy");
    c = merge_config(c, json::parse(R"({"sampler": {"nu": 2}, "schedule": {"grid": 7}})"));
    CHECK(c["sampler"]["nu"] == 2);
    CHECK_FALSE(c.contains("schedule"));  // known section, not read by sample-toy
    apply_assignment(c, "sampler.nu=0.25");
    CHECK(c["sampler"]["nu"].get<double>() == 0.25);
    apply_assignment(c, "sampler.steps=40");
    CHECK(c["sampler"]["steps"].is_number_integer());

    json t = default_config("theorem1");
    apply_assignment(t, "theorem1.sigmas=0.01,0.2");
    CHECK(t["theorem1"]["sigmas"] == json::parse("[0.01, 0.2]"));
    apply_text(t, "seed", "12");
    CHECK(t["seed"] == 12);
  }

  TEST_CASE("out-of-range values are reported with their path") {
    const fs::path out = scratch("range");
    CHECK(error_path([&] { quiet_run("schedule", out, {"schedule.grid=1"}); }) == "schedule.grid");
    CHECK(error_path([&] { quiet_run("schedule", out, {"schedule.kinds=sldm,nope"}); }) == "schedule.kinds");
    CHECK(error_path([&] { quiet_run("sample-toy", out); }) == "input.model");
    CHECK_FALSE(fs::exists(out));
  }

  TEST_CASE("manifest round trip") {
    const fs::path out = scratch("manifest");
    const RunResult r = quiet_run("schedule", out, {"schedule.grid=50", "seed=3"});
    CHECK(r.exit_code == 0);
    const json man = json::parse(slurp(out / "manifest.json"));
    CHECK(man["format"] == "sldm-manifest");
    CHECK(man["subcommand"] == "schedule");
    CHECK(man["tool_version"] == std::string(kToolVersion));
    const json loaded = load_config_file(out / "manifest.json", "schedule");
    CHECK(loaded["schedule"]["grid"] == 50);
    CHECK(loaded["seed"] == 3);
    CHECK(error_path([&] { load_config_file(out / "manifest.json", "trajectory"); }) == "subcommand");
    fs::remove_all(out);
  }

  TEST_CASE("csv cells") {
    CHECK(format_cell(Cell{}) == "");
    CHECK(format_cell(Cell{0.1}) == "0.1");
    CHECK(format_cell(Cell{1e-300}) == "1e-300");
    CHECK(format_cell(Cell{42LL}) == "42");
    CHECK(format_cell(Cell{std::string("a,b")}) == "\"a,b\"");
    CHECK(format_cell(Cell{std::string("say \"hi\"")}) == "\"say \"\"hi\"\"\"");
    const double x = 0.1 + 0.2;
    CHECK(std::stod(format_cell(Cell{x})) == x);

    Table t({"a", "b"});
    t.add({std::string("x"), 1.5});
    t.add({Cell{}, 2LL});
    CHECK(t.csv() == "a,b\nx,1.5\n,2\n");
    CHECK(t.number(1, 1) == 2.0);
    CHECK(std::isnan(t.number(1, 0)));
    CHECK_THROWS_AS(t.column("zzz"), std::out_of_range);
  }

  TEST_CASE("svg output") {
    PlotRequest req;
    req.title = "empty";
    req.x = "a";
    req.y = "b";
    const std::string empty = emit_plot(Table({"a", "b"}), req);
    CHECK(empty.rfind("<?xml", 0) == 0);
    CHECK(empty.size() > 7);
    CHECK(empty.substr(empty.size() - 7) == "</svg>\n");
    CHECK(count(empty, "data-series") == 0);
    CHECK(count(empty, "<g") == count(empty, "</g>"));

    Table traj({"schedule", "start", "t", "x"});
    for (const char* s : {"sldm", "ve"})
      for (long long k = 0; k < 3; ++k)
        for (double t : {0.9, 0.5, 0.0}) traj.add({std::string(s), k, t, t * static_cast<double>(k)});
    PlotRequest tr;
    tr.kind = PlotKind::Trajectory;
    const std::string svg = emit_plot(traj, tr);
    CHECK(count(svg, "<polyline data-series=") == 6);
    CHECK(count(svg, "class=\"panel\"") == 2);

    Table logs({"x", "y"});
    logs.add({1.0, 0.0});  // not representable on a log axis
    logs.add({10.0, 1.0});
    logs.add({100.0, 10.0});
    PlotRequest lr;
    lr.x = "x";
    lr.y = "y";
    lr.log_x = lr.log_y = true;
    const std::string lsvg = emit_plot(logs, lr);
    CHECK(lsvg.find("nan") == std::string::npos);
    CHECK(count(lsvg, "<polyline") == 1);
  }

  TEST_CASE("schedule subcommand tables") {
    const fs::path out = scratch("schedule");
    const RunResult r = quiet_run("schedule", out, {"schedule.grid=1000"});
    CHECK(r.exit_code == 0);
    const std::string csv = slurp(out / "schedule.csv");
    CHECK(count(csv, "\n") == 6001);
    CHECK(csv.rfind("kind,t,mu,sigma,mu_dot,sigma_dot,snr\n", 0) == 0);
    for (const auto& c : r.checks) CHECK_MESSAGE(c.passed, c.name);
    const json checks = json::parse(slurp(out / "checks.json"));
    CHECK(checks["passed"] == true);
    fs::remove_all(out);
  }

  TEST_CASE("theorem1 table holds the bound") {
    const fs::path out = scratch("theorem1");
    const RunResult r =
        quiet_run("theorem1", out, {"theorem1.sigmas=0.05", "theorem1.times=0.5", "theorem1.draws=20000"});
    CHECK(r.exit_code == 0);
    const std::string csv = slurp(out / "theorem1.csv");
    std::istringstream in(csv);
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    CHECK(header == "sigma,delta,t,violation_freq,bound,std_error,trials,within_bound");
    std::vector<std::string> cells;
    std::stringstream rs(row);
    for (std::string c; std::getline(rs, c, ',');) cells.push_back(c);
    REQUIRE(cells.size() == 8);
    CHECK(std::stod(cells[4]) == doctest::Approx(0.04).epsilon(1e-14));
    fs::remove_all(out);
  }

  TEST_CASE("a failed run leaves nothing behind") {
    const fs::path out = scratch("partial");
    fs::create_directories(out / "delta.csv");  // blocks the third table
    CHECK_THROWS(quiet_run("trajectory", out, {"trajectory.steps=16", "trajectory.starts=2"}));
    CHECK_FALSE(fs::exists(out / "trajectory.csv"));
    CHECK_FALSE(fs::exists(out / "curvature.csv"));
    CHECK_FALSE(fs::exists(out / "manifest.json"));
    CHECK(fs::is_directory(out / "delta.csv"));
    std::size_t left = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(out)) ++left;
    CHECK(left == 1);
    fs::remove_all(out);
  }

  TEST_CASE("command-line exit codes") {
    const fs::path out = scratch("main");
    auto call = [](std::vector<std::string> args) {
      std::vector<char*> argv;
      for (auto& a : args) argv.push_back(a.data());
      return sldm::cli::main(static_cast<int>(argv.size()), argv.data());
    };
    CHECK(call({"sldm", "schedule", "--quiet", "--out", out.string(), "--grid", "20"}) == 0);
    CHECK(fs::exists(out / "schedule.csv"));
    CHECK(call({"sldm", "schedule", "--quiet", "--out", out.string(), "--set", "schedule.grid=x"}) == 2);
    CHECK(call({"sldm", "schedule", "--quiet", "--out", out.string(), "--config", (out / "nope.json").string()}) == 2);
    CHECK(call({"sldm", "schedule", "--quiet", "--check", "--out", out.string(), "--config",
                (out / "manifest.json").string()}) == 0);
    fs::remove_all(out);
  }
}
