// End-to-end checks of the command-line tool: every subcommand, the exit-code
// contract (0 ok, 2 config error, 3 runtime failure), and determinism.
#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "statewise/cade_model.hpp"
#include "statewise/chain.hpp"
#include "statewise/model.hpp"
#include "statewise/policy.hpp"
#include "statewise/record.hpp"
#include "statewise/sim.hpp"

#include "helpers.hpp"

using namespace statewise;
using nlohmann::json;
using Catch::Approx;

namespace {

const char* kCli = STATEWISE_CLI_PATH;

int run(const std::string& args, bool quiet = true) {
    std::string cmd = std::string(kCli) + " " + args;
    if (quiet) cmd += " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    REQUIRE(out.good());
    out << text;
}

}  // namespace

TEST_CASE("simulate writes the requested number of events") {
    testutil::ScratchDir dir("cli_sim");
    const std::string out = dir.file("t.jsonl");
    REQUIRE(run("simulate --spec mnm1_example --events 1000 --seed 5 --out " + out) == 0);
    const Trajectory traj = read_jsonl(out);
    CHECK(traj.records.size() == 1000);
    CHECK(fingerprint(traj.spec) == fingerprint(spec_mnm1_example()));
    CHECK(validate_trajectory(traj).empty());
}

TEST_CASE("simulate is byte-identical across identical invocations") {
    testutil::ScratchDir dir("cli_det");
    const std::string a = dir.file("a.jsonl"), b = dir.file("b.jsonl"), c = dir.file("c.jsonl");
    REQUIRE(run("simulate --spec parallel_example --events 400 --seed 9 --out " + a) == 0);
    REQUIRE(run("simulate --spec parallel_example --events 400 --seed 9 --out " + b) == 0);
    REQUIRE(run("simulate --spec parallel_example --events 400 --seed 10 --out " + c) == 0);
    CHECK(testutil::slurp(a) == testutil::slurp(b));
    CHECK(testutil::slurp(a) != testutil::slurp(c));
}

TEST_CASE("the seed environment variable overrides the flag") {
    testutil::ScratchDir dir("cli_env");
    const std::string via_env = dir.file("env.jsonl"), via_flag = dir.file("flag.jsonl");
    const std::string base = "simulate --spec mnm1_example --events 200 --out ";
    const int status = std::system(("CONGEST_SEED=77 " + std::string(kCli) + " " + base + via_env +
                                    " --seed 5 >/dev/null 2>&1")
                                       .c_str());
    REQUIRE(WEXITSTATUS(status) == 0);
    REQUIRE(run(base + via_flag + " --seed 77") == 0);
    CHECK(testutil::slurp(via_env) == testutil::slurp(via_flag));

    const int bad = std::system(("CONGEST_SEED=banana " + std::string(kCli) + " " + base +
                                 dir.file("x.jsonl") + " >/dev/null 2>&1")
                                    .c_str());
    CHECK(WEXITSTATUS(bad) == 2);
}

TEST_CASE("configuration errors exit with code 2") {
    testutil::ScratchDir dir("cli_cfg");

    // A structurally complete spec with an illegal capacity.
    json bad = spec_mm1_admission(1.0, 1.0, 2);
    bad["cap0"] = 0;
    bad["arrival_rates"] = std::vector<double>{1.0};
    const std::string bad_spec = dir.file("bad_spec.json");
    write_text(bad_spec, bad.dump());
    CHECK(run("simulate --spec " + bad_spec + " --events 10 --out " + dir.file("o.jsonl")) == 2);

    // Exactly one horizon flag is required.
    CHECK(run("simulate --spec mnm1_example --out " + dir.file("h.jsonl")) == 2);
    CHECK(run("simulate --spec mnm1_example --events 5 --time 2 --out " + dir.file("h2.jsonl")) ==
          2);

    // Missing and malformed trajectory files.
    CHECK(run("learn --traj " + dir.file("nope.jsonl") + " --out " + dir.file("p.json")) == 2);
    const std::string garbage = dir.file("garbage.jsonl");
    write_text(garbage, "this is not json\n");
    CHECK(run("learn --traj " + garbage + " --out " + dir.file("p2.json")) == 2);

    // Unknown option values.
    REQUIRE(run("simulate --spec mnm1_example --events 50 --seed 3 --out " + dir.file("t.jsonl")) ==
            0);
    CHECK(run("learn --traj " + dir.file("t.jsonl") + " --mode bogus --out " +
              dir.file("p3.json")) == 2);

    // Ill-formed command lines and help.
    CHECK(run("") == 2);
    CHECK(run("no-such-command") == 2);
    CHECK(run("--help") == 0);
}

TEST_CASE("a trajectory too short to split exits with code 3") {
    testutil::ScratchDir dir("cli_short");
    const std::string traj = dir.file("tiny.jsonl");
    REQUIRE(run("simulate --spec mnm1_example --events 6 --seed 2 --out " + traj) == 0);
    CHECK(run("learn --traj " + traj + " --out " + dir.file("p.json")) == 3);
}

TEST_CASE("learn emits a loadable policy and a scored-candidate table") {
    testutil::ScratchDir dir("cli_learn");
    const std::string traj = dir.file("t.jsonl");
    REQUIRE(run("simulate --spec mnm1_example --events 4000 --seed 21 --out " + traj) == 0);

    const std::string pol_path = dir.file("policy.json");
    const std::string csv_path = dir.file("values.csv");
    REQUIRE(run("learn --traj " + traj + " --B 6 --seed 3 --out " + pol_path + " --value-csv " +
                csv_path) == 0);

    const PolicySpec pol = load_policy(pol_path);
    CHECK(pol.kind == PolicyKind::Threshold);
    CHECK_NOTHROW(validate_policy(pol, spec_mnm1_example()));

    const testutil::CsvFile csv = testutil::read_csv(csv_path);
    CHECK(csv.comment.find("fingerprint=" + fingerprint(spec_mnm1_example())) !=
          std::string::npos);
    REQUIRE(csv.header == std::vector<std::string>({"g", "value", "flagged_mass", "excluded"}));
    REQUIRE(!csv.rows.empty());
    for (const auto& row : csv.rows) {
        REQUIRE(row.size() == 4);
        CHECK((row[3] == "0" || row[3] == "1"));
    }
}

TEST_CASE("analyze-stationary reproduces the closed-form law") {
    testutil::ScratchDir dir("cli_stat");
    const SystemSpec spec = spec_mnm1_example();
    const int nq = spec.n_queue_states();
    const std::vector<double> pibar(static_cast<size_t>(nq), 0.65);
    write_text(dir.file("pibar.json"), json(pibar).dump());

    const std::string out = dir.file("stationary.csv");
    REQUIRE(run("analyze-stationary --spec mnm1_example --pibar " + dir.file("pibar.json") +
                " --out " + out) == 0);

    const StationaryResult truth = stationary_closed_form(spec, pibar);
    const testutil::CsvFile csv = testutil::read_csv(out);
    REQUIRE(csv.rows.size() == static_cast<size_t>(nq));
    for (int q = 0; q < nq; ++q) {
        const auto& row = csv.rows[static_cast<size_t>(q)];
        REQUIRE(std::stoi(row[0]) == q);
        CHECK(std::stod(row[2]) ==
              Approx(truth.queue_marginal[static_cast<size_t>(q)]).margin(1e-9));
        CHECK(std::stod(row[3]) ==
              Approx(truth.arrival_conditioned[static_cast<size_t>(q)]).margin(1e-9));
        const size_t aug = static_cast<size_t>(aug_index(spec, EventType::Arrival, q));
        CHECK(std::stod(row[6]) == Approx(truth.augmented[aug]).margin(1e-9));
    }
}

TEST_CASE("fit-cade writes a model that loads and predicts") {
    testutil::ScratchDir dir("cli_fit");
    const std::string traj = dir.file("t.jsonl");
    REQUIRE(run("simulate --spec mnm1_example --events 3000 --seed 8 --out " + traj) == 0);
    const std::string model_path = dir.file("model.json");
    REQUIRE(run("fit-cade --traj " + traj + " --estimator knn --train-split-only --out " +
                model_path) == 0);

    std::ifstream in(model_path);
    REQUIRE(in.good());
    const CadeModelPtr model = cade_model_from_json(json::parse(in));
    CHECK(model->id() == "knn");
    const std::vector<double> x(10, 0.5);
    CHECK(std::isfinite(model->tau(x, 0)));
}

TEST_CASE("ope evaluates a policy file and honors the split flag") {
    testutil::ScratchDir dir("cli_ope");
    const std::string traj = dir.file("t.jsonl");
    REQUIRE(run("simulate --spec mnm1_example --events 4000 --seed 13 --out " + traj) == 0);
    const std::string pol = dir.file("const.json");
    save_policy(constant_policy(0.5), pol);

    const std::string out = dir.file("result.json");
    REQUIRE(run("ope --traj " + traj + " --policy " + pol +
                " --objective avg_outcome --propensity known --out " + out) == 0);
    std::ifstream in(out);
    REQUIRE(in.good());
    const json res = json::parse(in);
    for (const char* key :
         {"objective", "value", "n_eval_arrivals", "flagged_mass", "r", "d_arrival", "pibar"})
        REQUIRE(res.contains(key));
    CHECK(res["objective"] == "avg_outcome");
    CHECK(std::isfinite(res["value"].get<double>()));
    CHECK(res["n_eval_arrivals"].get<long long>() > 0);

    // A split file that does not exist is a configuration error.
    CHECK(run("ope --traj " + traj + " --policy " + pol + " --split " + dir.file("no.json")) == 2);
}

TEST_CASE("oracle searches, evaluates, and tabulates the congestion diagnostic") {
    testutil::ScratchDir dir("cli_oracle");
    const std::string spec_path = dir.file("spec.json");
    write_text(spec_path, json(spec_mm1_admission(1.0, 1.0, 2)).dump());

    const std::string opt_path = dir.file("optimal.json");
    REQUIRE(run("oracle --spec " + spec_path +
                " --objective avg_outcome --optimal --n-mc 2000 --out " + opt_path) == 0);
    {
        std::ifstream in(opt_path);
        const json res = json::parse(in);
        REQUIRE(res.contains("g"));
        REQUIRE(res["g"].size() == 3);
        CHECK(std::isfinite(res["value"].get<double>()));
        CHECK(std::isfinite(res["direct_value"].get<double>()));
        REQUIRE(res.contains("start_values"));
    }

    const std::string pol = dir.file("never.json");
    save_policy(constant_policy(0.0), pol);
    const std::string val_path = dir.file("value.json");
    REQUIRE(run("oracle --spec " + spec_path + " --policy " + pol +
                " --objective avg_outcome --n-mc 2000 --out " + val_path) == 0);
    {
        std::ifstream in(val_path);
        const json res = json::parse(in);
        CHECK(res["value"].get<double>() == Approx(0.3989).margin(0.05));
    }

    const std::string caie_path = dir.file("caie.csv");
    REQUIRE(run("oracle --spec " + spec_path + " --caie --caie-reps 200 --out " + caie_path) ==
            0);
    const testutil::CsvFile csv = testutil::read_csv(caie_path);
    REQUIRE(csv.header ==
            std::vector<std::string>({"k0", "k1", "caie", "se", "recouple_rate"}));
    REQUIRE(csv.rows.size() == 2);  // one per state admitting arrivals
    for (const auto& row : csv.rows) CHECK(std::stod(row[4]) > 0.5);

    // Oracle with no action flags is a usage error.
    CHECK(run("oracle --spec " + spec_path) == 2);
}
