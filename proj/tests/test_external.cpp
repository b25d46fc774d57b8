#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "fomemo/external_problem.hpp"

using namespace fomemo;
namespace fs = std::filesystem;

namespace {

struct ScriptFile {
  fs::path path;
  explicit ScriptFile(const std::string& body) {
    path = fs::temp_directory_path() /
           ("fomemo_child_" + std::to_string(std::rand()) + ".py");
    std::ofstream(path) << body;
  }
  ~ScriptFile() { fs::remove(path); }
  std::string command() const { return "python3 -u " + path.string(); }
};

const char* kEchoChild = R"PY(
import sys, json
for line in sys.stdin:
    x = json.loads(line)["x"]
    print(json.dumps({"y": x}), flush=True)
)PY";

const char* kWrongArityChild = R"PY(
import sys, json
for line in sys.stdin:
    x = json.loads(line)["x"]
    print(json.dumps({"y": x + [0.0]}), flush=True)
)PY";

const char* kOneShotChild = R"PY(
import sys, json
line = sys.stdin.readline()
x = json.loads(line)["x"]
print(json.dumps({"y": x}), flush=True)
)PY";

const char* kGarbageChild = R"PY(
import sys
sys.stdin.readline()
print("not json at all", flush=True)
)PY";

const char* kSlowChild = R"PY(
import sys, time
sys.stdin.readline()
time.sleep(5)
)PY";

}  // namespace

TEST_CASE("echo child is the identity problem") {
  ScriptFile script(kEchoChild);
  BenchmarkProblem p = external_problem(script.command(), 2, 2);
  Eigen::VectorXd x(2);
  x << 0.25, 0.75;
  for (int rep = 0; rep < 3; ++rep) {
    const Eigen::VectorXd y = p.evaluate(x);
    REQUIRE(y(0) == 0.25);
    REQUIRE(y(1) == 0.75);
  }
  REQUIRE_THROWS_AS(p.true_front(10), NoAnalyticFront);
}

TEST_CASE("wrong arity reply raises ProtocolError") {
  ScriptFile script(kWrongArityChild);
  BenchmarkProblem p = external_problem(script.command(), 2, 2);
  REQUIRE_THROWS_AS(p.evaluate(Eigen::VectorXd::Constant(2, 0.5)),
                    ProtocolError);
}

TEST_CASE("malformed reply raises ProtocolError") {
  ScriptFile script(kGarbageChild);
  BenchmarkProblem p = external_problem(script.command(), 2, 2);
  REQUIRE_THROWS_AS(p.evaluate(Eigen::VectorXd::Constant(2, 0.5)),
                    ProtocolError);
}

TEST_CASE("child exiting mid-run raises ChildExitError") {
  ScriptFile script(kOneShotChild);
  BenchmarkProblem p = external_problem(script.command(), 2, 2);
  const Eigen::VectorXd first = p.evaluate(Eigen::VectorXd::Constant(2, 0.5));
  REQUIRE(first(0) == 0.5);
  REQUIRE_THROWS_AS(p.evaluate(Eigen::VectorXd::Constant(2, 0.25)),
                    ChildExitError);
}

TEST_CASE("silent child raises TimeoutError") {
  ScriptFile script(kSlowChild);
  BenchmarkProblem p = external_problem(script.command(), 2, 2, {}, 0.3);
  REQUIRE_THROWS_AS(p.evaluate(Eigen::VectorXd::Constant(2, 0.5)),
                    TimeoutError);
}

TEST_CASE("custom bounds are honored") {
  ScriptFile script(kEchoChild);
  Eigen::MatrixX2d bounds(2, 2);
  bounds << -1.0, 1.0, 0.0, 10.0;
  BenchmarkProblem p = external_problem(script.command(), 2, 2, bounds);
  Eigen::VectorXd u(2);
  u << 0.5, 0.5;
  const Eigen::VectorXd y = p.evaluate_unit(u);
  REQUIRE(y(0) == 0.0);
  REQUIRE(y(1) == 5.0);
  REQUIRE_THROWS_AS(p.evaluate(Eigen::VectorXd::Constant(2, 20.0)),
                    BoundsError);
}
