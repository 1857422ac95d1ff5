// Impact-aware mutational fuzzer over testcases, searching for new vulnerable
// contexts, plus the patch-based check that a new impact belongs to the same
// underlying bug.
#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "miniscope/exec.hpp"
#include "miniscope/ir.hpp"

namespace miniscope {

// Memory-corruption impacts carry a fingerprint; faults and assertions do not
// identify a reusable primitive.
inline bool is_memory_impact(ImpactKind k) {
    switch (k) {
        case ImpactKind::OobRead:
        case ImpactKind::OobWrite:
        case ImpactKind::UafRead:
        case ImpactKind::UafWrite:
        case ImpactKind::InvalidFree:
            return true;
        default:
            return false;
    }
}

struct Fingerprint {
    std::vector<std::string> frames;  // innermost 3 functions, fault site first
    ImpactKind kind = ImpactKind::Warn;
    std::string alloc_site;

    friend bool operator<(const Fingerprint& a, const Fingerprint& b) {
        return std::tie(a.frames, a.kind, a.alloc_site) <
               std::tie(b.frames, b.kind, b.alloc_site);
    }
    friend bool operator==(const Fingerprint& a, const Fingerprint& b) {
        return a.frames == b.frames && a.kind == b.kind && a.alloc_site == b.alloc_site;
    }
    std::string str() const {
        std::string s;
        for (const auto& f : frames) s += f + "<";
        s += impact_kind_name(kind);
        s += "@" + alloc_site;
        return s;
    }
};

inline Fingerprint fingerprint_of(const Impact& i) {
    Fingerprint f;
    f.kind = i.kind;
    f.frames.push_back(i.loc.function);
    for (const auto& c : i.call_trace) {
        if (f.frames.size() >= 3) break;
        f.frames.push_back(c.function);
    }
    f.alloc_site = i.alloc_site.str();
    return f;
}

enum class ContextOrigin { Original, Fuzzed };

struct Context {
    TestCase poc;
    std::vector<Impact> impacts;
    ContextOrigin origin = ContextOrigin::Original;
    Fingerprint fingerprint;  // of the initial memory impact
};

struct FuzzConfig {
    std::uint64_t exec_budget = 50'000;
    int mutation_priority_burst = 500;   // mutations granted to a discovering seed
    int stagnation_threshold = 2'000;    // executions without progress before relaxing
    double removal_probability = 0.02;   // relaxed mode only
    std::uint64_t rng_seed = 1;
    bool coverage_only = false;          // ablation: drop the impact feedback
    ExecConfig exec;
};

enum class FuzzMode { Restricted, Relaxed };

namespace fuzzdetail {

inline const std::vector<std::uint64_t>& interesting_constants() {
    static const std::vector<std::uint64_t> v = {
        0,
        1,
        4095,
        4096,
        0x7fffffffull,
        0x7fffffffffffffffull,
        kRedzone,
        kRedzone + 1,
        2 * kRedzone + 1,  // straddles a redzone when used as a size or offset
    };
    return v;
}

// Syscalls the mutator may insert: restricted mode takes the union of the
// templates subsuming any of the testcase's syscalls, relaxed mode widens to
// every syscall of any module containing those templates.
inline std::vector<std::string> insertion_pool(const TestCase& tc, FuzzMode mode,
                                               const Program& p) {
    std::set<std::string> in_tc;
    for (const auto& c : tc.calls) in_tc.insert(c.syscall);
    std::set<std::string> tpl_hit;
    for (const auto& [tname, syscalls] : p.templates)
        for (const auto& s : syscalls)
            if (in_tc.count(s)) tpl_hit.insert(tname);
    std::set<std::string> allowed;
    if (mode == FuzzMode::Restricted) {
        for (const auto& t : tpl_hit)
            for (const auto& s : p.templates.at(t)) allowed.insert(s);
    } else {
        for (const auto& [mname, tpls] : p.modules) {
            bool hit = false;
            for (const auto& t : tpls) hit = hit || tpl_hit.count(t);
            if (!hit) continue;
            for (const auto& t : tpls)
                for (const auto& s : p.templates.at(t)) allowed.insert(s);
        }
    }
    return {allowed.begin(), allowed.end()};
}

}  // namespace fuzzdetail

// One mutation: insert a syscall from the mode's pool, or mutate one argument.
// Relaxed mode may instead delete one call. Inserted calls carry zero
// arguments; interesting values only enter through argument mutation.
inline TestCase mutate(const TestCase& tc, FuzzMode mode, const Program& p,
                       std::mt19937_64& rng, double removal_probability = 0.02) {
    TestCase out = tc;
    if (mode == FuzzMode::Relaxed && out.calls.size() >= 2) {
        if (rng() % 10'000 < static_cast<std::uint64_t>(removal_probability * 10'000)) {
            out.calls.erase(out.calls.begin() +
                            static_cast<std::ptrdiff_t>(rng() % out.calls.size()));
            return out;
        }
    }
    auto pool = fuzzdetail::insertion_pool(tc, mode, p);
    std::vector<size_t> with_args;
    for (size_t i = 0; i < out.calls.size(); ++i)
        if (!out.calls[i].args.empty()) with_args.push_back(i);

    bool insert = !pool.empty() && (with_args.empty() || rng() % 2 == 0);
    if (insert) {
        TestCase::Call c;
        c.syscall = pool[rng() % pool.size()];
        int fi = p.function_index.at(c.syscall);
        c.args.assign(p.functions[fi].params.size(), 0);
        out.calls.insert(out.calls.begin() +
                             static_cast<std::ptrdiff_t>(rng() % (out.calls.size() + 1)),
                         std::move(c));
        return out;
    }
    if (with_args.empty()) return out;  // nothing to do
    auto& call = out.calls[with_args[rng() % with_args.size()]];
    std::uint64_t& arg = call.args[rng() % call.args.size()];
    switch (rng() % 3) {
        case 0: arg ^= 1ull << (rng() % 64); break;
        case 1: arg += (rng() % 2 == 0) ? 1 : ~0ull; break;
        default: {
            const auto& ks = fuzzdetail::interesting_constants();
            arg = ks[rng() % ks.size()];
            break;
        }
    }
    return out;
}

struct FuzzOutcome {
    std::vector<Context> contexts;   // original first, then discovery order
    std::vector<int> schedule;       // parent seed id per execution
    std::uint64_t executions = 0;
    std::uint64_t relaxed_at = 0;    // execution count when relaxed; 0 = never
};

inline FuzzOutcome fuzz_campaign(const Program& p, const TestCase& poc,
                                 const FuzzConfig& cfg = {}) {
    ExecResult r0 = execute(p, poc, cfg.exec);
    if (r0.impacts.empty())
        throw Error("ReproFailure: original testcase produced no impact");

    auto first_memory_fp = [](const std::vector<Impact>& impacts)
        -> std::pair<bool, Fingerprint> {
        for (const auto& i : impacts)
            if (is_memory_impact(i.kind)) return {true, fingerprint_of(i)};
        return {false, {}};
    };

    FuzzOutcome out;
    std::set<Fingerprint> known;      // every memory fingerprint seen
    std::set<Fingerprint> original;   // fingerprints of the original run
    for (const auto& i : r0.impacts)
        if (is_memory_impact(i.kind)) {
            known.insert(fingerprint_of(i));
            original.insert(fingerprint_of(i));
        }
    auto [had0, fp0] = first_memory_fp(r0.impacts);
    if (!had0 && !r0.impacts.empty()) fp0 = fingerprint_of(r0.impacts.front());
    out.contexts.push_back({poc, r0.impacts, ContextOrigin::Original, fp0});
    std::set<Fingerprint> ctx_seen = {fp0};

    std::vector<TestCase> seeds = {poc};
    std::deque<int> impact_q, cov_q;
    if (cfg.coverage_only || !had0)
        cov_q.push_back(0);
    else
        impact_q.push_back(0);
    std::set<Edge> coverage = r0.coverage;

    std::mt19937_64 rng(cfg.rng_seed);
    int burst_seed = -1, burst_left = 0, stagnation = 0;
    bool relaxed = false;

    auto rotate = [](std::deque<int>& q) {
        int id = q.front();
        q.pop_front();
        q.push_back(id);
        return id;
    };

    for (std::uint64_t i = 0; i < cfg.exec_budget; ++i) {
        int parent;
        if (burst_left > 0) {
            parent = burst_seed;
            --burst_left;
        } else if (!impact_q.empty()) {
            parent = rotate(impact_q);
        } else {
            parent = rotate(cov_q);
        }
        out.schedule.push_back(parent);

        TestCase child = mutate(seeds[parent],
                                relaxed ? FuzzMode::Relaxed : FuzzMode::Restricted, p, rng,
                                cfg.removal_probability);
        ExecResult r = execute(p, child, cfg.exec);
        out.executions++;

        bool new_cov = false;
        for (const auto& e : r.coverage) new_cov = coverage.insert(e).second || new_cov;
        bool new_fp = false;
        for (const auto& imp : r.impacts)
            if (is_memory_impact(imp.kind))
                new_fp = known.insert(fingerprint_of(imp)).second || new_fp;

        auto [has_first, fp] = first_memory_fp(r.impacts);
        if (has_first && !(fp == fp0) && !original.count(fp) && !ctx_seen.count(fp)) {
            out.contexts.push_back({child, r.impacts, ContextOrigin::Fuzzed, fp});
            ctx_seen.insert(fp);
        }

        if (!cfg.coverage_only && new_fp) {
            seeds.push_back(child);
            int id = static_cast<int>(seeds.size()) - 1;
            impact_q.push_back(id);
            burst_seed = id;
            burst_left = cfg.mutation_priority_burst;
            stagnation = 0;
        } else if (new_cov) {
            seeds.push_back(child);
            cov_q.push_back(static_cast<int>(seeds.size()) - 1);
            stagnation = 0;
        } else if (++stagnation >= cfg.stagnation_threshold && !relaxed) {
            relaxed = true;  // one-way switch, mirrors the wall-clock fallback
            out.relaxed_at = i + 1;
        }
    }
    return out;
}

inline std::vector<Context> fuzz_contexts(const Program& p, const TestCase& poc,
                                          const FuzzConfig& cfg = {}) {
    return fuzz_campaign(p, poc, cfg).contexts;
}

// ---------------------------------------------------------------------------
// Same-bug confirmation across program versions

struct VersionSet {
    std::string base_text;                // source at bug discovery
    std::vector<Diff> intermediate_diffs; // ordered changes up to the fix
    Diff patch_diff;                      // the fix itself
};

// Directory layout: base.mk, 0001.diff .. NNNN.diff, patch.diff.
inline VersionSet load_version_set(const std::string& dir) {
    namespace fs = std::filesystem;
    auto read = [](const fs::path& p) {
        std::ifstream f(p, std::ios::binary);
        if (!f) throw Error("cannot open " + p.string());
        std::ostringstream ss;
        ss << f.rdbuf();
        return ss.str();
    };
    auto load_diff = [&](const fs::path& p) {
        auto d = parse_diff(read(p));
        if (!d.ok()) throw Error(p.string() + ": " + d.error_text());
        return *d.value;
    };
    VersionSet vs;
    vs.base_text = read(fs::path(dir) / "base.mk");
    std::vector<fs::path> inter;
    for (const auto& e : fs::directory_iterator(dir)) {
        auto name = e.path().filename().string();
        if (name.size() > 5 && name.substr(name.size() - 5) == ".diff" && name != "patch.diff")
            inter.push_back(e.path());
    }
    std::sort(inter.begin(), inter.end());
    for (const auto& p : inter) vs.intermediate_diffs.push_back(load_diff(p));
    vs.patch_diff = load_diff(fs::path(dir) / "patch.diff");
    return vs;
}

enum class SameBugVerdict { SameBug, DifferentBug, Ambiguous };

inline const char* same_bug_verdict_name(SameBugVerdict v) {
    switch (v) {
        case SameBugVerdict::SameBug: return "same-bug";
        case SameBugVerdict::DifferentBug: return "different-bug";
        case SameBugVerdict::Ambiguous: return "ambiguous";
    }
    return "?";
}

namespace fuzzdetail {

inline std::variant<std::string, Conflict> apply_all(std::string text,
                                                     const std::vector<Diff>& diffs) {
    for (const auto& d : diffs) {
        auto r = apply_diff(text, d);
        if (std::holds_alternative<Conflict>(r)) return std::get<Conflict>(r);
        text = std::get<std::string>(r);
    }
    return text;
}

// Does the context's fingerprint still trigger on this program text?
inline bool triggers_on(const std::string& text, const Context& ctx,
                        const ExecConfig& cfg) {
    auto pr = parse_program(text);
    if (!pr.ok()) return false;
    for (const auto& c : ctx.poc.calls)
        if (!pr.value->is_entry(c.syscall)) return false;
    auto r = execute(*pr.value, ctx.poc, cfg);
    for (const auto& i : r.impacts)
        if (fingerprint_of(i) == ctx.fingerprint) return true;
    return false;
}

}  // namespace fuzzdetail

// Decide whether a fuzzed context exploits the bug the patch fixes.
// (1) Still triggers on the fully patched version: a different bug.
// (2) The patch applies directly to the base: rerun; gone means same bug,
//     persisting means a different one.
// (3) Patch conflicts: build base + intermediates only; if the impact still
//     reproduces there, the intermediates do not interfere: same bug.
// (4) Otherwise give up.
inline SameBugVerdict confirm_same_bug(const Context& ctx, const VersionSet& vs,
                                       const ExecConfig& cfg = {}) {
    std::vector<Diff> all = vs.intermediate_diffs;
    all.push_back(vs.patch_diff);
    auto full = fuzzdetail::apply_all(vs.base_text, all);
    if (std::holds_alternative<Conflict>(full))
        throw Error("VersionBuildError: fully patched version does not build: " +
                    std::get<Conflict>(full).message);
    const std::string& full_text = std::get<std::string>(full);
    if (!parse_program(full_text).ok())
        throw Error("VersionBuildError: fully patched version does not re-parse");

    if (fuzzdetail::triggers_on(full_text, ctx, cfg)) return SameBugVerdict::DifferentBug;

    auto direct = apply_diff(vs.base_text, vs.patch_diff);
    if (std::holds_alternative<std::string>(direct)) {
        const std::string& text = std::get<std::string>(direct);
        if (parse_program(text).ok())
            return fuzzdetail::triggers_on(text, ctx, cfg) ? SameBugVerdict::DifferentBug
                                                           : SameBugVerdict::SameBug;
    }

    auto inter = fuzzdetail::apply_all(vs.base_text, vs.intermediate_diffs);
    if (std::holds_alternative<std::string>(inter) &&
        fuzzdetail::triggers_on(std::get<std::string>(inter), ctx, cfg))
        return SameBugVerdict::SameBug;

    return SameBugVerdict::Ambiguous;
}

}  // namespace miniscope
