// Acceptance gate: each criterion prints exactly one PASS/FAIL line. A
// criterion fails on the first violated check and reports why.
#include <chrono>
#include <cstdio>
#include <functional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "miniscope/pipeline.hpp"
#include "oracle.hpp"
#include "support.hpp"

using namespace miniscope;
using testsupport::corpus_dir;
using testsupport::load_poc;
using testsupport::load_program;

namespace {

struct CheckFail : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void check(bool ok, const std::string& what) {
    if (!ok) throw CheckFail(what);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Snapshot snapshot_of(const std::string& stem, const Program& p) {
    return snapshot_at_first_vuln_read(p, load_poc(stem, p));
}

const Finding* find_prim(const ExploreResult& r, PrimitiveKind k) {
    for (const auto& f : r.findings)
        if (f.primitive == k) return &f;
    return nullptr;
}

int count_validated(const std::vector<Finding>& fs, PrimitiveKind k) {
    int n = 0;
    for (const auto& f : fs) n += f.primitive == k && f.validated;
    return n;
}

// Independent replay: rerun the program concretely with the finding's witness
// bytes and spray, and look for a matching recorded event at the same site.
bool replays(const Program& p, const Snapshot& snap, const Finding& f) {
    ExecConfig cfg;
    cfg.record_events = true;
    ExecResult r;
    try {
        r = replay_with_bytes(p, snap, f.object_bytes, cfg, f.spray);
    } catch (const Error&) {
        return false;
    }
    switch (f.primitive) {
        case PrimitiveKind::Uow:
            for (const auto& i : r.impacts)
                if ((i.kind == ImpactKind::UafWrite || i.kind == ImpactKind::OobWrite) &&
                    i.loc == f.site)
                    return true;
            return false;
        case PrimitiveKind::If:
            for (const auto& i : r.impacts)
                if (i.kind == ImpactKind::InvalidFree && i.loc == f.site) return true;
            for (const auto& e : r.events)
                if (e.kind == EventKind::FreeCall && e.loc == f.site && f.has_expected &&
                    e.addr == f.expected)
                    return true;
            return false;
        case PrimitiveKind::Aaw:
        case PrimitiveKind::Caw:
            for (const auto& e : r.events)
                if (e.kind == EventKind::Store && e.loc == f.site && f.has_expected &&
                    e.addr == f.expected)
                    return true;
            return false;
        case PrimitiveKind::Avw:
        case PrimitiveKind::Cvw:
            for (const auto& e : r.events)
                if (e.kind == EventKind::Store && e.loc == f.site && f.has_expected &&
                    e.value == f.expected)
                    return true;
            return false;
        case PrimitiveKind::Fpd:
            for (const auto& e : r.events)
                if (e.kind == EventKind::Icall && e.loc == f.site && f.has_expected &&
                    e.addr == f.expected)
                    return true;
            return false;
    }
    return false;
}

void c1_escalation() {
    auto t0 = std::chrono::steady_clock::now();
    auto p = load_program("fig2_tcindex");
    auto rep = run_pipeline(p, load_poc("fig2_tcindex", p));
    check(rep.verdict == "high-risk", "verdict is " + rep.verdict);
    check(rep.contexts.size() == 1, "expected one context");
    const auto& fs = rep.contexts[0].findings;
    bool aaw = false, fpd = false;
    for (const auto& f : fs) {
        if (f.primitive == PrimitiveKind::Aaw && f.validated &&
            f.site.function == "tcf_action_destroy")
            aaw = true;
        if (f.primitive == PrimitiveKind::Fpd && f.validated &&
            f.site.function == "tcf_action_cleanup")
            fpd = true;
    }
    check(aaw, "no validated AAW at the null-out store");
    check(fpd, "no validated FPD at the cleanup pointer call");
    check(seconds_since(t0) < 30.0, "took >= 30 s");
}

void c2_guidance_value() {
    auto p = load_program("fig2_tcindex");
    auto snap = snapshot_of("fig2_tcindex", p);
    auto anchor = locate_vuln_point(p, snap.trigger);
    auto tr = estimate_hidden_impacts(p, anchor);
    const Guidance::Trace* fpd_trace = nullptr;
    for (const auto& [id, t] : tr.guidance.traces)
        if (t.kind == PotentialKind::Fpd) fpd_trace = &t;
    check(fpd_trace != nullptr, "no pointer-call trace in the estimate");

    SymConfig cfg;
    auto guided = explore(p, snap, fpd_trace, cfg);
    const Finding* gf = find_prim(guided, PrimitiveKind::Fpd);
    check(gf != nullptr && gf->validated, "guided run missed the FPD");

    SymConfig small = cfg;
    small.state_budget = guided.states_explored;
    check(find_prim(explore(p, snap, nullptr, small), PrimitiveKind::Fpd) == nullptr,
          "blind run found the FPD within the guided budget");

    auto blind = explore(p, snap, nullptr, cfg);
    check(find_prim(blind, PrimitiveKind::Fpd) != nullptr, "blind run never found it");
    check(blind.states_explored >= 10 * guided.states_explored,
          "state ratio below 10x: " + std::to_string(blind.states_explored) + " vs " +
              std::to_string(guided.states_explored));
}

void c3_address_classification() {
    auto p = load_program("fig5_bfs");
    auto r = explore(p, snapshot_of("fig5_bfs", p), nullptr);
    check(find_prim(r, PrimitiveKind::Aaw) != nullptr, "no AAW finding");
    check(find_prim(r, PrimitiveKind::Caw) == nullptr,
          "store misclassified as constrained");
}

void c4_value_models() {
    auto p = load_program("fig6_tcp");
    auto r = explore(p, snapshot_of("fig6_tcp", p), nullptr);
    check(count_validated(r.findings, PrimitiveKind::Uow) == 2,
          "expected exactly 2 validated UOW");
    bool lo = false, hi = false;  // counter field vs. cached-pointer field
    for (const auto& f : r.findings) {
        if (f.primitive != PrimitiveKind::Uow) continue;
        for (size_t i = 0; i < 8 && i < f.object_bytes.size(); ++i)
            if (f.object_bytes[i]) lo = true;
        for (size_t i = 8; i < 16 && i < f.object_bytes.size(); ++i)
            if (f.object_bytes[i]) hi = true;
    }
    check(lo && hi, "models leave a required field zero");
}

void c5_fuzzing_utility() {
    auto p = load_program("fig4_rxrpc");
    auto poc = load_poc("fig4_rxrpc", p);
    PipelineConfig cfg;
    cfg.versions_dir = corpus_dir() + "/fig4_versions";
    cfg.rng_seed = 11;
    cfg.exec_budget = 50'000;
    auto rep = run_pipeline(p, poc, cfg);
    check(rep.contexts.size() >= 2, "fuzzing found no confirmed new context");
    for (const auto& cr : rep.contexts) {
        int fpd = count_validated(cr.findings, PrimitiveKind::Fpd);
        if (cr.context.origin == ContextOrigin::Original)
            check(fpd == 0, "FPD in the original context");
        else
            check(fpd >= 1, "fuzzed context without an FPD finding");
    }
    cfg.coverage_only = true;
    auto ablated = run_pipeline(p, poc, cfg);
    check(ablated.contexts.size() == 1, "ablation still found a new context");
}

void c6_same_bug_table() {
    auto p = load_program("fig4_rxrpc");
    Context ctx;
    ctx.poc.calls = {{"rx_open", {}}, {"rx_close", {}}, {"rx_keepalive", {4096}}};
    auto r = execute(p, ctx.poc);
    for (const auto& i : r.impacts)
        if (is_memory_impact(i.kind)) {
            ctx.fingerprint = fingerprint_of(i);
            break;
        }
    ctx.impacts = r.impacts;
    ctx.origin = ContextOrigin::Fuzzed;

    auto verdict = [&](const std::string& name) {
        return confirm_same_bug(ctx, load_version_set(corpus_dir() + "/" + name));
    };
    check(verdict("fig4_versions") == SameBugVerdict::SameBug, "clean fix");
    check(verdict("fig4_versions_wrongfix") == SameBugVerdict::DifferentBug,
          "surviving bug");
    check(verdict("fig4_versions_refactor") == SameBugVerdict::SameBug,
          "conflicting fix, benign intermediates");
    check(verdict("fig4_versions_rework") == SameBugVerdict::Ambiguous,
          "conflicting fix, interfering intermediates");
}

void c7_sanitizer_suite() {
    struct Planted {
        const char* stem;
        ImpactKind kind;
        int alloc;
        std::int64_t offset;
    };
    const std::vector<Planted> table = {
        {"uaf_read", ImpactKind::UafRead, 0, 0},
        {"uaf_write", ImpactKind::UafWrite, 0, 8},
        {"oob_read", ImpactKind::OobRead, 0, 16},
        {"oob_write", ImpactKind::OobWrite, 0, 20},
        {"oob_read_left", ImpactKind::OobRead, 0, -8},
        {"oob_write_left", ImpactKind::OobWrite, 0, -4},
        {"invalid_free", ImpactKind::InvalidFree, 0, 8},
        {"double_free", ImpactKind::InvalidFree, 0, 0},
        {"null_deref", ImpactKind::NullDeref, -1, 0},
        {"gpf_load", ImpactKind::Gpf, -1, 0},
        {"assert_warn", ImpactKind::Warn, -1, 0},
        {"assert_bug", ImpactKind::Bug, -1, 0},
    };
    for (const auto& t : table) {
        auto p = load_program(t.stem);
        auto r = execute(p, load_poc(t.stem, p));
        check(r.impacts.size() == 1, std::string(t.stem) + ": impact count");
        check(r.impacts[0].kind == t.kind, std::string(t.stem) + ": kind");
        check(r.impacts[0].vuln_alloc == t.alloc, std::string(t.stem) + ": allocation");
        check(r.impacts[0].offset == t.offset, std::string(t.stem) + ": offset");
    }
    auto p = load_program("fig2_tcindex");
    auto r = execute(p, load_poc("fig2_tcindex", p));
    check(r.impacts.size() >= 2 && r.impacts.front().kind == ImpactKind::OobRead &&
              r.impacts.back().kind == ImpactKind::Gpf,
          "multi-shot did not record the read before the kill");
}

void c8_replay_oracle() {
    struct Source {
        std::string stem;
        TestCase tc;
        bool guided;
    };
    std::vector<Source> sources;
    for (const auto& stem : {"fig2_tcindex", "fig5_bfs", "fig6_tcp", "fig7_refcount"}) {
        auto p = load_program(stem);
        sources.push_back({stem, load_poc(stem, p), stem == std::string("fig2_tcindex")});
    }
    {
        // The fuzzed keepalive context carries the corpus' remaining findings.
        TestCase tc;
        tc.calls = {{"rx_open", {}}, {"rx_close", {}}, {"rx_keepalive", {4096}}};
        sources.push_back({"fig4_rxrpc", tc, false});
    }
    int validated = 0;
    for (const auto& s : sources) {
        auto p = load_program(s.stem);
        auto snap = snapshot_at_first_vuln_read(p, s.tc);
        ExploreResult r;
        if (s.guided) {
            auto anchor = locate_vuln_point(p, snap.trigger);
            r = explore_with_guidance(p, snap, estimate_hidden_impacts(p, anchor).guidance);
        } else {
            r = explore(p, snap, nullptr);
        }
        for (const auto& f : r.findings) {
            if (!f.validated) continue;
            ++validated;
            check(replays(p, snap, f), s.stem + ": validated " +
                                           primitive_name(f.primitive) + " at " +
                                           f.site.str() + " fails replay");
        }
    }
    check(validated > 0, "no validated findings in the corpus");
}

void c9_taint_completeness() {
    auto t0 = std::chrono::steady_clock::now();
    std::vector<std::pair<std::string, TestCase>> cases;
    for (const auto& stem : {"fig2_tcindex", "fig5_bfs", "fig6_tcp", "fig7_refcount",
                             "uaf_read", "oob_read", "oob_read_left"}) {
        auto p = load_program(stem);
        cases.push_back({stem, load_poc(stem, p)});
    }
    {
        auto p = load_program("fig4_rxrpc");
        auto tc = load_poc("fig4_rxrpc", p);
        tc.calls.back().args[0] = 4096;
        cases.push_back({"fig4_rxrpc", tc});
    }
    for (const auto& [stem, tc] : cases) {
        auto p = load_program(stem);
        auto snap = snapshot_at_first_vuln_read(p, tc);
        auto tr = estimate_hidden_impacts(p, locate_vuln_point(p, snap.trigger));
        std::set<std::pair<int, std::string>> stat;
        for (const auto& pi : tr.impacts)
            stat.insert({static_cast<int>(pi.kind), pi.sink.str()});
        for (const auto& ev : testsupport::ForcedPathOracle(p, snap).run())
            check(stat.count({static_cast<int>(ev.kind), ev.sink}) == 1,
                  stem + ": reachable sink " + ev.sink + " missing from the estimate");
    }
    check(seconds_since(t0) < 120.0, "took >= 2 min");
}

void c10_determinism() {
    auto p2 = load_program("fig2_tcindex");
    auto poc2 = load_poc("fig2_tcindex", p2);
    check(emit_report(run_pipeline(p2, poc2)) == emit_report(run_pipeline(p2, poc2)),
          "reports differ without fuzzing");
    auto p4 = load_program("fig4_rxrpc");
    auto poc4 = load_poc("fig4_rxrpc", p4);
    PipelineConfig cfg;
    cfg.versions_dir = corpus_dir() + "/fig4_versions";
    cfg.rng_seed = 11;
    check(emit_report(run_pipeline(p4, poc4, cfg)) ==
              emit_report(run_pipeline(p4, poc4, cfg)),
          "reports differ with fuzzing");
}

}  // namespace

int main() {
    struct Criterion {
        const char* what;
        void (*fn)();
    };
    const std::vector<Criterion> criteria = {
        {"out-of-bounds read escalates to validated AAW and FPD in under 30 s",
         c1_escalation},
        {"guided exploration beats blind search by at least 10x in states",
         c2_guidance_value},
        {"write through a constrained-memory address classifies as AAW, not CAW",
         c3_address_classification},
        {"exactly 2 validated freed-object writes, with both fields modeled nonzero",
         c4_value_models},
        {"impact-guided fuzzing finds the confirmed context the ablation cannot",
         c5_fuzzing_utility},
        {"patch confirmation decides same-bug, different-bug, and ambiguous correctly",
         c6_same_bug_table},
        {"all 12 planted bugs report exact kind, allocation, and offset",
         c7_sanitizer_suite},
        {"every validated finding replays concretely at its site", c8_replay_oracle},
        {"forced-path oracle sinks are a subset of the static estimate in under 2 min",
         c9_taint_completeness},
        {"identical inputs and seed give byte-identical reports", c10_determinism},
    };
    int failures = 0;
    for (size_t i = 0; i < criteria.size(); ++i) {
        std::string msg;
        try {
            criteria[i].fn();
        } catch (const std::exception& e) {
            msg = e.what();
        }
        if (msg.empty()) {
            std::printf("PASS %2zu: %s\n", i + 1, criteria[i].what);
        } else {
            std::printf("FAIL %2zu: %s (%s)\n", i + 1, criteria[i].what, msg.c_str());
            ++failures;
        }
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
