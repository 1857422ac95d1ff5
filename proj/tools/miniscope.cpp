// Command-line front end: `run` drives the whole pipeline, the other
// subcommands expose its stages individually.
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "miniscope/pipeline.hpp"

namespace {

using namespace miniscope;
using nlohmann::ordered_json;

constexpr int kExitOk = 0;
constexpr int kExitInputError = 2;
constexpr int kExitInternalError = 3;

struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

Program load_program(const std::string& path) {
    auto r = parse_program(read_file(path));
    if (!r.ok()) throw InputError(path + ": " + r.error_text());
    return *r.value;
}

TestCase load_poc(const std::string& path, const Program& p) {
    auto r = parse_testcase(read_file(path), p);
    if (!r.ok()) throw InputError(path + ": " + r.error_text());
    return *r.value;
}

void write_output(const std::optional<std::string>& path, const std::string& text) {
    if (!path) {
        std::cout << text;
        return;
    }
    std::ofstream f(*path, std::ios::binary);
    if (!f) throw InputError("cannot write " + *path);
    f << text;
}

ordered_json impacts_json(const ExecResult& r) {
    ordered_json j = ordered_json::array();
    for (const auto& i : r.impacts) j.push_back(pipedetail::impact_json(i));
    return j;
}

int cmd_run(const std::string& program, const std::string& poc, PipelineConfig cfg,
            const std::optional<std::string>& out) {
    auto p = load_program(program);
    auto tc = load_poc(poc, p);
    if (cfg.versions_dir) load_version_set(*cfg.versions_dir);  // validate early
    auto rep = run_pipeline(p, tc, cfg);
    write_output(out, emit_report(rep));
    return kExitOk;
}

int cmd_reproduce(const std::string& program, const std::string& poc,
                  const std::optional<std::string>& out) {
    auto p = load_program(program);
    auto tc = load_poc(poc, p);
    auto r = execute(p, tc);
    ordered_json j;
    j["impacts"] = impacts_json(r);
    j["steps"] = r.steps;
    j["reproduced"] = !r.impacts.empty();
    write_output(out, j.dump(2) + "\n");
    return kExitOk;
}

int cmd_fuzz(const std::string& program, const std::string& poc,
             const std::optional<std::string>& versions, FuzzConfig cfg,
             const std::optional<std::string>& out) {
    auto p = load_program(program);
    auto tc = load_poc(poc, p);
    std::optional<VersionSet> vs;
    if (versions) vs = load_version_set(*versions);
    auto campaign = fuzz_campaign(p, tc, cfg);
    ordered_json j;
    j["executions"] = campaign.executions;
    j["relaxed_at"] = campaign.relaxed_at;
    j["contexts"] = ordered_json::array();
    for (const auto& c : campaign.contexts) {
        ordered_json cj;
        cj["origin"] = c.origin == ContextOrigin::Original ? "original" : "fuzzed";
        cj["fingerprint"] = c.fingerprint.str();
        cj["poc"] = print_testcase(c.poc);
        cj["impacts"] = ordered_json::array();
        for (const auto& i : c.impacts) cj["impacts"].push_back(pipedetail::impact_json(i));
        if (vs && c.origin == ContextOrigin::Fuzzed)
            cj["same_bug"] = same_bug_verdict_name(confirm_same_bug(c, *vs, cfg.exec));
        j["contexts"].push_back(std::move(cj));
    }
    write_output(out, j.dump(2) + "\n");
    return kExitOk;
}

int cmd_taint(const std::string& program, const std::string& poc,
              const std::optional<std::string>& out) {
    auto p = load_program(program);
    auto tc = load_poc(poc, p);
    auto snap = snapshot_at_first_vuln_read(p, tc);
    auto anchor = locate_vuln_point(p, snap.trigger);
    auto tr = estimate_hidden_impacts(p, anchor);
    ordered_json j;
    j["anchor"] = anchor.instruction.str();
    j["complete"] = tr.complete;
    j["sinks"] = ordered_json::array();
    for (const auto& s : tr.impacts) {
        ordered_json sj;
        sj["kind"] = potential_kind_name(s.kind);
        sj["sink"] = s.sink.str();
        sj["distance"] = s.distance;
        sj["trace_id"] = s.trace_id;
        j["sinks"].push_back(std::move(sj));
    }
    write_output(out, j.dump(2) + "\n");
    return kExitOk;
}

int cmd_sym(const std::string& program, const std::string& poc, SymConfig cfg,
            const std::optional<std::string>& out) {
    auto p = load_program(program);
    auto tc = load_poc(poc, p);
    auto snap = snapshot_at_first_vuln_read(p, tc);
    auto anchor = locate_vuln_point(p, snap.trigger);
    auto tr = estimate_hidden_impacts(p, anchor);
    auto r = explore_with_guidance(p, snap, tr.guidance, cfg);
    ordered_json j;
    j["states_explored"] = r.states_explored;
    j["findings"] = ordered_json::array();
    for (const auto& f : r.findings) j["findings"].push_back(pipedetail::finding_json(f));
    write_output(out, j.dump(2) + "\n");
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bug-impact escalation for MiniKernel programs"};
    app.require_subcommand(1);

    std::string program, poc;
    std::optional<std::string> versions, out;
    PipelineConfig pcfg;
    FuzzConfig fcfg;
    SymConfig scfg;
    std::uint64_t seed = 1;

    auto add_common = [&](CLI::App* c) {
        c->add_option("--program", program, "MiniKernel program (.mk)")->required();
        c->add_option("--poc", poc, "testcase (.poc)")->required();
        c->add_option("--out", out, "output path (default: stdout)");
    };

    auto* run = app.add_subcommand("run", "full pipeline");
    add_common(run);
    run->add_option("--versions", versions, "version set directory (enables fuzzing)");
    run->add_option("--seed", seed, "rng seed");
    run->add_option("--guidance-threshold", pcfg.guidance_threshold,
                    "distance in blocks beyond which exploration is guided");
    run->add_option("--exec-budget", pcfg.exec_budget, "fuzzing execution budget");
    run->add_option("--state-budget", pcfg.state_budget, "symbolic state budget");
    run->add_flag("--coverage-only", pcfg.coverage_only,
                  "ablation: disable impact feedback in the fuzzer");

    auto* rep = app.add_subcommand("reproduce", "run the testcase, list impacts");
    add_common(rep);

    auto* fz = app.add_subcommand("fuzz", "search for new vulnerable contexts");
    add_common(fz);
    fz->add_option("--versions", versions, "version set directory");
    fz->add_option("--seed", seed, "rng seed");
    fz->add_option("--exec-budget", fcfg.exec_budget, "execution budget");
    fz->add_flag("--coverage-only", fcfg.coverage_only,
                 "ablation: disable impact feedback");

    auto* ta = app.add_subcommand("taint", "estimate hidden impacts");
    add_common(ta);

    auto* sy = app.add_subcommand("sym", "guided symbolic exploration");
    add_common(sy);
    sy->add_option("--state-budget", scfg.state_budget, "symbolic state budget");
    sy->add_option("--guidance-threshold", scfg.threshold_blocks,
                   "distance in blocks beyond which exploration is guided");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitInputError;
    }

    try {
        if (run->parsed()) {
            pcfg.versions_dir = versions;
            pcfg.rng_seed = seed;
            return cmd_run(program, poc, pcfg, out);
        }
        if (rep->parsed()) return cmd_reproduce(program, poc, out);
        if (fz->parsed()) {
            fcfg.rng_seed = seed;
            return cmd_fuzz(program, poc, versions, fcfg, out);
        }
        if (ta->parsed()) return cmd_taint(program, poc, out);
        if (sy->parsed()) return cmd_sym(program, poc, scfg, out);
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInputError;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitInternalError;
    }
    return kExitInternalError;
}
