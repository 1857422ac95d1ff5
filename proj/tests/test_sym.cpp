#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <random>
#include <set>

#include "doctest.h"
#include "miniscope/sym.hpp"
#include "support.hpp"

using namespace miniscope;
using testsupport::load_poc;
using testsupport::load_program;

namespace {

Snapshot snapshot_of(const std::string& stem, const Program& p) {
    return snapshot_at_first_vuln_read(p, load_poc(stem, p));
}

const Finding* find_prim(const ExploreResult& r, PrimitiveKind k) {
    for (const auto& f : r.findings)
        if (f.primitive == k) return &f;
    return nullptr;
}

std::vector<const Finding*> all_prim(const ExploreResult& r, PrimitiveKind k) {
    std::vector<const Finding*> v;
    for (const auto& f : r.findings)
        if (f.primitive == k) v.push_back(&f);
    return v;
}

Program parse_inline(const std::string& text) {
    auto r = parse_program(text);
    REQUIRE(r.ok());
    return *r.value;
}

TestCase trigger_poc(const Program& p) {
    auto r = parse_testcase("poc {\n  call trigger()\n}\n", p);
    REQUIRE(r.ok());
    return *r.value;
}

}  // namespace

TEST_CASE("constant folding and byte algebra") {
    auto five = mk_bin(SymOp::Add, mk_const(2), mk_const(3));
    CHECK(is_const(five));
    CHECK(five->cval == 5);
    CHECK(mk_bin(SymOp::Shl, mk_const(1), mk_const(8))->cval == 256);
    CHECK(mk_bin(SymOp::Lt, mk_const(3), mk_const(3))->cval == 0);
    CHECK(mk_bin(SymOp::Le, mk_const(3), mk_const(3))->cval == 1);

    SymbolTable t;
    std::vector<SymRef> bytes;
    for (int i = 0; i < 8; ++i) bytes.push_back(mk_sym(t.fresh_obj(i), 8));
    auto word = mk_concat(bytes);
    // Extracting a byte of a concat returns the original byte expression.
    for (int i = 0; i < 8; ++i) CHECK(mk_extract(word, i) == bytes[i]);
    // Concatenating all extracts of a word collapses back to the word.
    std::vector<SymRef> re;
    auto sum = mk_bin(SymOp::Add, word, mk_const(0x1122334455667788ull));
    for (int i = 0; i < 8; ++i) re.push_back(mk_extract(sum, i));
    CHECK(mk_concat(re) == sum);

    Model m;
    for (int i = 0; i < 8; ++i) m.vals[i] = (i == 0) ? 0x40 : 0;
    CHECK(eval(word, m, t, nullptr) == 0x40);
    CHECK(eval(sum, m, t, nullptr) == 0x40 + 0x1122334455667788ull);
    CHECK(eval(mk_extract(sum, 0), m, t, nullptr) == ((0x40 + 0x88) & 0xFF));
}

TEST_CASE("check_sat basics") {
    SymbolTable t;
    std::vector<SymRef> bytes;
    for (int i = 0; i < 8; ++i) bytes.push_back(mk_sym(t.fresh_obj(i), 8));
    auto word = mk_concat(bytes);

    SUBCASE("no constraints is trivially sat") {
        CHECK(check_sat({}, t).status == SatStatus::Sat);
    }
    SUBCASE("stale-byte defaults satisfy without assignments") {
        std::vector<std::uint8_t> stale{5, 0, 0, 0, 0, 0, 0, 0};
        auto r = check_sat({mk_bin(SymOp::Ne, word, mk_const(0xFF))}, t, &stale);
        CHECK(r.status == SatStatus::Sat);
        CHECK(r.model.vals.empty());
    }
    SUBCASE("contradictory equalities are unsat") {
        auto r = check_sat({mk_bin(SymOp::Eq, word, mk_const(1)),
                            mk_bin(SymOp::Eq, word, mk_const(2))},
                           t);
        CHECK(r.status == SatStatus::Unsat);
    }
    SUBCASE("guard plus equality picks the forced value") {
        auto r = check_sat({mk_bin(SymOp::Ne, word, mk_const(~0ull)),
                            mk_bin(SymOp::Eq, word, mk_const(1))},
                           t);
        REQUIRE(r.status == SatStatus::Sat);
        CHECK(eval(word, r.model, t, nullptr) == 1);
    }
    SUBCASE("small domains fall back to brute force") {
        SymbolTable t2;
        auto a = mk_sym(t2.fresh_obj(0), 8);
        auto b = mk_sym(t2.fresh_obj(1), 8);
        auto prod = mk_bin(SymOp::Mul, a, b);
        auto r = check_sat({mk_bin(SymOp::Eq, prod, mk_const(35)),
                            mk_bin(SymOp::Ne, a, mk_const(1)),
                            mk_bin(SymOp::Ne, b, mk_const(1))},
                           t2);
        REQUIRE(r.status == SatStatus::Sat);
        CHECK(eval(prod, r.model, t2, nullptr) == 35);
    }
    SUBCASE("wide nonlinear constraints degrade to fragment, not a wrong answer") {
        SymbolTable t2;
        auto a = mk_sym(t2.fresh_mem(mk_const(0x10000), 8), 64);
        auto b = mk_sym(t2.fresh_mem(mk_const(0x20000), 8), 64);
        auto r = check_sat({mk_bin(SymOp::Eq, mk_bin(SymOp::Mul, a, b),
                                   mk_const(0x123456789ull)),
                            mk_bin(SymOp::Ne, a, mk_const(1)),
                            mk_bin(SymOp::Ne, b, mk_const(1))},
                           t2);
        CHECK(r.status == SatStatus::Fragment);
    }
}

TEST_CASE("address and value classification follow constraint overlap") {
    SymbolTable t;
    auto a = mk_sym(t.fresh_mem(mk_const(0x10000), 8), 64);
    auto b = mk_sym(t.fresh_mem(mk_const(0x20000), 8), 64);

    std::mt19937_64 rng(42);
    auto pick_op = [&] {
        static const SymOp ops[] = {SymOp::Add, SymOp::Sub, SymOp::And, SymOp::Or,
                                    SymOp::Xor};
        return ops[rng() % 5];
    };
    for (int iter = 0; iter < 200; ++iter) {
        // Random expression over {a, b, const}, depth up to 3.
        std::function<SymRef(int)> gen = [&](int depth) -> SymRef {
            int c = rng() % (depth > 0 ? 4 : 3);
            switch (c) {
                case 0: return a;
                case 1: return b;
                case 2: return mk_const(rng() % 1000 + 1);
                default: return mk_bin(pick_op(), gen(depth - 1), gen(depth - 1));
            }
        };
        SymRef expr = gen(3);
        bool mentions_a = [&] {
            std::set<int> s;
            collect_syms(expr, s);
            return s.count(0) != 0;
        }();
        std::vector<SymRef> cs = {mk_bin(SymOp::Ne, a, mk_const(rng() % 100))};
        std::vector<bool> path = {false};
        std::vector<bool> validity = {true};
        auto want_addr = mentions_a ? PrimitiveKind::Caw : PrimitiveKind::Aaw;
        auto want_val = mentions_a ? PrimitiveKind::Cvw : PrimitiveKind::Avw;
        CHECK(classify_address(expr, cs, path) == want_addr);
        CHECK(classify_value(expr, cs, path) == want_val);
        // The same constraint flagged as a validity fact never constrains.
        CHECK(classify_address(expr, cs, validity) == PrimitiveKind::Aaw);
        CHECK(classify_value(expr, cs, validity) == PrimitiveKind::Avw);
    }
}

TEST_CASE("repeated reads of one address stay consistent") {
    auto p = parse_inline(
        "program rrc\n"
        "fn trigger() {\n"
        "bb0:\n"
        "  r1 = alloc 16\n"
        "  r2 = const 7\n"
        "  store r1 + 0, r2, 8\n"
        "  free r1\n"
        "  r3 = load r1 + 0, 8\n"
        "  r4 = load r3 + 0, 8\n"
        "  r5 = load r3 + 0, 8\n"
        "  r6 = cmp eq r4, r5\n"
        "  condbr r6, bbeq, bbne\n"
        "bbne:\n"
        "  r7 = const 1\n"
        "  store r3 + 8, r7, 8\n"
        "  br bbeq\n"
        "bbeq:\n"
        "  ret 0\n"
        "}\n"
        "entry trigger\n");
    auto snap = snapshot_at_first_vuln_read(p, trigger_poc(p));
    auto r = explore(p, snap, nullptr);
    // The two loads return the same symbol, so the unequal branch is dead and
    // the write behind it must not surface as a primitive.
    CHECK(r.findings.empty());
    CHECK(r.fragment_kills >= 1);
}

TEST_CASE("addresses forced into the null page kill the path") {
    auto p = parse_inline(
        "program nullkill\n"
        "fn trigger() {\n"
        "bb0:\n"
        "  r1 = alloc 16\n"
        "  r2 = const 7\n"
        "  store r1 + 0, r2, 8\n"
        "  free r1\n"
        "  r3 = load r1 + 0, 8\n"
        "  r4 = cmp lt r3, 64\n"
        "  condbr r4, bblow, bbhi\n"
        "bblow:\n"
        "  r5 = load r3 + 0, 8\n"
        "  r6 = const 1\n"
        "  store r3 + 8, r6, 8\n"
        "  br bbhi\n"
        "bbhi:\n"
        "  ret 0\n"
        "}\n"
        "entry trigger\n");
    auto snap = snapshot_at_first_vuln_read(p, trigger_poc(p));
    auto r = explore(p, snap, nullptr);
    CHECK(r.findings.empty());
    CHECK(r.fragment_kills >= 1);
}

TEST_CASE("fig6 analog yields exactly two validated writes into freed memory") {
    auto p = load_program("fig6_tcp");
    auto snap = snapshot_of("fig6_tcp", p);
    auto r = explore(p, snap, nullptr);

    auto uows = all_prim(r, PrimitiveKind::Uow);
    REQUIRE(uows.size() == 2);
    std::set<std::string> sites;
    for (const auto* f : uows) {
        CHECK(f->validated);
        CHECK(f->site.function == "tcp_check");
        sites.insert(f->site.str());
        // Both writes need sacked_out and highest_sack analogs nonzero.
        REQUIRE(f->object_bytes.size() == 32);
        bool s_nz = false, h_nz = false;
        for (int i = 0; i < 8; ++i) s_nz = s_nz || f->object_bytes[i] != 0;
        for (int i = 8; i < 16; ++i) h_nz = h_nz || f->object_bytes[i] != 0;
        CHECK(s_nz);
        CHECK(h_nz);
    }
    CHECK(sites.size() == 2);

    // The incremented counter is a value write not pinned by any branch.
    auto avw = find_prim(r, PrimitiveKind::Avw);
    REQUIRE(avw != nullptr);
    CHECK(avw->validated);
    CHECK(avw->has_expected);
    CHECK(avw->expected == 1);  // stale counter is 0

    CHECK(find_prim(r, PrimitiveKind::Caw) == nullptr);
    CHECK(find_prim(r, PrimitiveKind::Fpd) == nullptr);
}

TEST_CASE("fig5 analog yields an arbitrary-address write, not a constrained one") {
    auto p = load_program("fig5_bfs");
    auto snap = snapshot_of("fig5_bfs", p);
    auto r = explore(p, snap, nullptr);

    auto aaw = find_prim(r, PrimitiveKind::Aaw);
    REQUIRE(aaw != nullptr);
    CHECK(aaw->validated);
    CHECK(aaw->site.function == "scan");
    // The pointer came straight off the redzone: only the null-page validity
    // fact mentions it, which must not demote the write to constrained.
    CHECK(find_prim(r, PrimitiveKind::Caw) == nullptr);

    // The stored value passed through the full-bitmap guard.
    auto cvw = find_prim(r, PrimitiveKind::Cvw);
    REQUIRE(cvw != nullptr);
    CHECK(cvw->validated);
    CHECK(find_prim(r, PrimitiveKind::Avw) == nullptr);
}

TEST_CASE("fig7 analog solves the refcount guard to reach the locked write") {
    auto p = load_program("fig7_refcount");
    auto snap = snapshot_of("fig7_refcount", p);
    auto r = explore(p, snap, nullptr);

    auto uow = find_prim(r, PrimitiveKind::Uow);
    REQUIRE(uow != nullptr);
    CHECK(uow->validated);
    REQUIRE(uow->object_bytes.size() == 16);
    // The guard admits exactly refcount == 1.
    CHECK(uow->object_bytes[0] == 1);
    for (int i = 1; i < 8; ++i) CHECK(uow->object_bytes[i] == 0);
}

TEST_CASE("fig2 analog under guidance reaches the far write and pointer call") {
    auto p = load_program("fig2_tcindex");
    auto snap = snapshot_of("fig2_tcindex", p);
    auto anchor = locate_vuln_point(p, snap.trigger);
    auto tr = estimate_hidden_impacts(p, anchor);
    REQUIRE(!tr.guidance.traces.empty());

    auto r = explore_with_guidance(p, snap, tr.guidance);

    auto aaw = find_prim(r, PrimitiveKind::Aaw);
    REQUIRE(aaw != nullptr);
    CHECK(aaw->validated);
    CHECK(aaw->site.function == "tcf_action_destroy");
    CHECK(aaw->has_expected);
    CHECK(aaw->expected >= kNullPageEnd);

    auto fpd = find_prim(r, PrimitiveKind::Fpd);
    REQUIRE(fpd != nullptr);
    CHECK(fpd->validated);
    CHECK(fpd->site.function == "tcf_action_cleanup");
    CHECK(fpd->has_expected);
    // The hijacked target is one of the sprayed planted values.
    CHECK(fpd->expected >= 0x5000000000ull);
    // The refcount byte had to be steered to exactly 1 to take the put path.
    bool has_one = false;
    for (const auto& [name, v] : fpd->model) has_one = has_one || v == 1;
    CHECK(has_one);
}

TEST_CASE("guidance reaches the pointer call in a fraction of the states") {
    auto p = load_program("fig2_tcindex");
    auto snap = snapshot_of("fig2_tcindex", p);
    auto anchor = locate_vuln_point(p, snap.trigger);
    auto tr = estimate_hidden_impacts(p, anchor);

    const Guidance::Trace* fpd_trace = nullptr;
    int fpd_id = -1;
    for (const auto& [id, t] : tr.guidance.traces)
        if (t.kind == PotentialKind::Fpd) {
            fpd_trace = &t;
            fpd_id = id;
        }
    REQUIRE(fpd_trace != nullptr);
    CHECK(fpd_trace->distance > SymConfig{}.threshold_blocks);

    SymConfig cfg;
    auto guided = explore(p, snap, fpd_trace, cfg);
    auto* gf = find_prim(guided, PrimitiveKind::Fpd);
    REQUIRE(gf != nullptr);
    CHECK(gf->validated);
    CHECK(guided.states_explored <= 4);
    (void)fpd_id;

    // Same state budget, no guidance: the pointer call is out of reach.
    SymConfig small = cfg;
    small.state_budget = guided.states_explored;
    auto blind_small = explore(p, snap, nullptr, small);
    CHECK(find_prim(blind_small, PrimitiveKind::Fpd) == nullptr);

    // Unguided search does get there eventually, at a much larger cost.
    auto blind_large = explore(p, snap, nullptr, cfg);
    auto* bf = find_prim(blind_large, PrimitiveKind::Fpd);
    REQUIRE(bf != nullptr);
    CHECK(blind_large.states_explored >= 10 * guided.states_explored);
}

TEST_CASE("every emitted finding validates by concrete replay") {
    struct Case {
        std::string stem;
        bool guided;
    };
    for (const Case& c : {Case{"fig2_tcindex", true}, Case{"fig5_bfs", false},
                          Case{"fig6_tcp", false}, Case{"fig7_refcount", false}}) {
        CAPTURE(c.stem);
        auto p = load_program(c.stem);
        auto snap = snapshot_of(c.stem, p);
        ExploreResult r;
        if (c.guided) {
            auto anchor = locate_vuln_point(p, snap.trigger);
            auto tr = estimate_hidden_impacts(p, anchor);
            r = explore_with_guidance(p, snap, tr.guidance);
        } else {
            r = explore(p, snap, nullptr);
        }
        REQUIRE(!r.findings.empty());
        for (const auto& f : r.findings) {
            CAPTURE(primitive_name(f.primitive));
            CAPTURE(f.site.str());
            CHECK(f.validated);
        }
    }
}

TEST_CASE("exploration is deterministic") {
    auto p = load_program("fig2_tcindex");
    auto snap = snapshot_of("fig2_tcindex", p);
    auto anchor = locate_vuln_point(p, snap.trigger);
    auto tr = estimate_hidden_impacts(p, anchor);

    auto serialize = [](const ExploreResult& r) {
        std::string s = std::to_string(r.states_explored) + "/" +
                        std::to_string(r.states_created) + "/" +
                        std::to_string(r.fragment_kills);
        for (const auto& f : r.findings) {
            s += "|" + std::string(primitive_name(f.primitive)) + "@" + f.site.str() +
                 ":" + std::to_string(f.expected) + ":" + (f.validated ? "v" : "-");
            for (auto b : f.object_bytes) s += "," + std::to_string(b);
            for (const auto& [a, b] : f.spray)
                s += ";" + std::to_string(a) + "=" + std::to_string(b);
        }
        return s;
    };
    auto r1 = explore_with_guidance(p, snap, tr.guidance);
    auto r2 = explore_with_guidance(p, snap, tr.guidance);
    CHECK(serialize(r1) == serialize(r2));
}
