// End-to-end orchestration: reproduce a testcase, optionally explore new
// vulnerable contexts by fuzzing, estimate hidden impacts, run guided symbolic
// execution, and aggregate everything into a risk report.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "miniscope/exec.hpp"
#include "miniscope/fuzz.hpp"
#include "miniscope/ir.hpp"
#include "miniscope/sym.hpp"
#include "miniscope/taint.hpp"

namespace miniscope {

inline const char* kToolVersion = "0.1.0";

struct PipelineConfig {
    std::optional<std::string> versions_dir;  // enables the fuzzing stage
    std::uint64_t rng_seed = 1;
    int guidance_threshold = 40;              // blocks; beyond this, guide
    std::uint64_t exec_budget = 50'000;       // fuzzing executions
    std::uint64_t state_budget = 4'096;       // symbolic states per run
    bool coverage_only = false;               // fuzzer ablation
    ExecConfig exec;
};

struct ContextReport {
    int context_id = 0;
    Context context;
    std::vector<Finding> findings;
    std::uint64_t sym_states = 0;
    std::string error;  // stage failure captured here, never propagated
};

struct Report {
    std::string verdict;  // high-risk | low-risk | no-repro
    std::vector<ContextReport> contexts;
    std::map<std::string, int> totals;            // primitive -> finding count
    std::map<std::string, int> validated_totals;  // primitive -> validated count
    std::uint64_t reproduce_steps = 0;
    std::uint64_t fuzz_executions = 0;
    PipelineConfig config;
};

namespace pipedetail {

inline Context context_from_run(const TestCase& poc, const ExecResult& r) {
    Context c;
    c.poc = poc;
    c.impacts = r.impacts;
    c.origin = ContextOrigin::Original;
    for (const auto& i : r.impacts)
        if (is_memory_impact(i.kind)) {
            c.fingerprint = fingerprint_of(i);
            return c;
        }
    if (!r.impacts.empty()) c.fingerprint = fingerprint_of(r.impacts.front());
    return c;
}

// Taint + guided symbolic execution for one context, if it exposes a flagged
// read to anchor on.
inline void analyze_context(const Program& p, ContextReport& cr,
                            const PipelineConfig& cfg) {
    bool has_read = false;
    for (const auto& i : cr.context.impacts)
        has_read = has_read || i.kind == ImpactKind::UafRead || i.kind == ImpactKind::OobRead;
    if (!has_read) return;
    try {
        auto snap = snapshot_at_first_vuln_read(p, cr.context.poc, {}, cfg.exec);
        auto anchor = locate_vuln_point(p, snap.trigger);
        auto taint = estimate_hidden_impacts(p, anchor);
        SymConfig sc;
        sc.state_budget = cfg.state_budget;
        sc.threshold_blocks = cfg.guidance_threshold;
        auto sym = explore_with_guidance(p, snap, taint.guidance, sc);
        for (auto& f : sym.findings) f.context_id = cr.context_id;
        cr.findings = std::move(sym.findings);
        cr.sym_states = sym.states_explored;
    } catch (const Error& e) {
        cr.error = e.what();
    }
}

}  // namespace pipedetail

inline Report run_pipeline(const Program& p, const TestCase& poc,
                           const PipelineConfig& cfg = {}) {
    Report rep;
    rep.config = cfg;
    for (const char* k : {"UOW", "AAW", "CAW", "AVW", "CVW", "FPD", "IF"}) {
        rep.totals[k] = 0;
        rep.validated_totals[k] = 0;
    }

    ExecResult r0 = execute(p, poc, cfg.exec);
    rep.reproduce_steps = r0.steps;
    if (r0.impacts.empty()) {
        rep.verdict = "no-repro";
        return rep;
    }

    std::vector<Context> contexts;
    if (cfg.versions_dir) {
        VersionSet vs = load_version_set(*cfg.versions_dir);
        FuzzConfig fc;
        fc.exec_budget = cfg.exec_budget;
        fc.rng_seed = cfg.rng_seed;
        fc.coverage_only = cfg.coverage_only;
        fc.exec = cfg.exec;
        auto out = fuzz_campaign(p, poc, fc);
        rep.fuzz_executions = out.executions;
        for (const auto& c : out.contexts) {
            if (c.origin == ContextOrigin::Original ||
                confirm_same_bug(c, vs, cfg.exec) == SameBugVerdict::SameBug)
                contexts.push_back(c);
        }
    } else {
        contexts.push_back(pipedetail::context_from_run(poc, r0));
    }

    bool concrete_write = false;
    for (int id = 0; id < static_cast<int>(contexts.size()); ++id) {
        ContextReport cr;
        cr.context_id = id;
        cr.context = contexts[static_cast<size_t>(id)];
        for (const auto& i : cr.context.impacts)
            concrete_write = concrete_write || is_memory_write_impact(i.kind);
        pipedetail::analyze_context(p, cr, cfg);
        for (const auto& f : cr.findings) {
            rep.totals[primitive_name(f.primitive)]++;
            if (f.validated) rep.validated_totals[primitive_name(f.primitive)]++;
        }
        rep.contexts.push_back(std::move(cr));
    }

    bool any_validated = false;
    for (const auto& [k, n] : rep.validated_totals) any_validated = any_validated || n > 0;
    rep.verdict = (any_validated || concrete_write) ? "high-risk" : "low-risk";
    return rep;
}

// ---------------------------------------------------------------------------
// JSON emission: fixed key order, arrays ordered by sequence / context id, so
// identical inputs give byte-identical reports.

namespace pipedetail {

using ordered_json = nlohmann::ordered_json;

inline ordered_json impact_json(const Impact& i) {
    ordered_json j;
    j["kind"] = impact_kind_name(i.kind);
    j["site"] = i.loc.str();
    j["alloc_site"] = i.alloc_site.str();
    j["offset"] = i.offset;
    j["width"] = i.width;
    j["seq"] = i.seq;
    return j;
}

inline ordered_json finding_json(const Finding& f) {
    ordered_json j;
    j["primitive"] = primitive_name(f.primitive);
    j["site"] = f.site.str();
    j["validated"] = f.validated;
    j["context_id"] = f.context_id;
    j["trace_id"] = f.trace_id;
    if (f.has_expected) j["expected"] = f.expected;
    return j;
}

inline ordered_json counts_json(const std::map<std::string, int>& m) {
    ordered_json j;
    for (const char* k : {"UOW", "AAW", "CAW", "AVW", "CVW", "FPD", "IF"}) {
        auto it = m.find(k);
        j[k] = it == m.end() ? 0 : it->second;
    }
    return j;
}

}  // namespace pipedetail

inline std::string emit_report(const Report& r) {
    using pipedetail::ordered_json;
    ordered_json j;
    j["verdict"] = r.verdict;
    j["contexts"] = ordered_json::array();
    for (const auto& cr : r.contexts) {
        ordered_json c;
        c["id"] = cr.context_id;
        c["origin"] =
            cr.context.origin == ContextOrigin::Original ? "original" : "fuzzed";
        c["fingerprint"] = cr.context.fingerprint.str();
        c["poc"] = print_testcase(cr.context.poc);
        c["impacts"] = ordered_json::array();
        for (const auto& i : cr.context.impacts)
            c["impacts"].push_back(pipedetail::impact_json(i));
        c["findings"] = ordered_json::array();
        std::map<std::string, int> counts, validated;
        for (const auto& f : cr.findings) {
            c["findings"].push_back(pipedetail::finding_json(f));
            counts[primitive_name(f.primitive)]++;
            if (f.validated) validated[primitive_name(f.primitive)]++;
        }
        c["counts"] = pipedetail::counts_json(counts);
        c["validated_counts"] = pipedetail::counts_json(validated);
        c["sym_states"] = cr.sym_states;
        c["error"] = cr.error;
        j["contexts"].push_back(std::move(c));
    }
    j["totals"] = pipedetail::counts_json(r.totals);
    j["validated_totals"] = pipedetail::counts_json(r.validated_totals);
    ordered_json prov;
    prov["tool"] = "miniscope";
    prov["version"] = kToolVersion;
    prov["seed"] = r.config.rng_seed;
    prov["exec_budget"] = r.config.exec_budget;
    prov["state_budget"] = r.config.state_budget;
    prov["guidance_threshold"] = r.config.guidance_threshold;
    prov["versions"] = r.config.versions_dir ? ordered_json(*r.config.versions_dir)
                                             : ordered_json(nullptr);
    prov["coverage_only"] = r.config.coverage_only;
    j["provenance"] = std::move(prov);
    ordered_json t;
    t["reproduce_steps"] = r.reproduce_steps;
    t["fuzz_executions"] = r.fuzz_executions;
    std::uint64_t sym_states = 0;
    for (const auto& cr : r.contexts) sym_states += cr.sym_states;
    t["sym_states"] = sym_states;
    j["timings"] = std::move(t);
    return j.dump(2) + "\n";
}

}  // namespace miniscope
