// Snapshot-based symbolic executor. The vulnerable object's bytes become
// symbols, paths are explored under optional taint-trace guidance, and each
// high-risk event is classified into an exploit-primitive class, solved for a
// concrete witness, and validated by concrete replay.
#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "miniscope/exec.hpp"
#include "miniscope/taint.hpp"

namespace miniscope {

// ---------------------------------------------------------------------------
// Expressions

enum class SymOp { Add, Sub, Mul, And, Or, Xor, Shl, Shr, Eq, Ne, Lt, Le, Extract, Concat };

struct SymExpr;
using SymRef = std::shared_ptr<const SymExpr>;

struct SymExpr {
    enum class Kind { Const, Sym, Op } kind = Kind::Const;
    std::uint64_t cval = 0;
    int sym = -1;   // symbol id
    int bits = 64;
    SymOp op = SymOp::Add;
    int byte = 0;   // Extract byte index
    std::vector<SymRef> kids;
};

struct SymbolTable {
    struct Info {
        std::string name;
        int bits = 8;
        bool is_obj = false;
        std::int64_t obj_index = -1;   // byte index into the symbolized region
        SymRef load_addr;              // mem symbols: address expression
        int load_width = 0;
    };
    std::vector<Info> syms;

    int fresh_obj(std::int64_t index) {
        Info i;
        i.name = "obj" + std::to_string(index);
        i.is_obj = true;
        i.obj_index = index;
        syms.push_back(std::move(i));
        return static_cast<int>(syms.size()) - 1;
    }
    int fresh_mem(SymRef addr, int width) {
        Info i;
        i.name = "mem" + std::to_string(syms.size());
        i.bits = width * 8;
        i.load_addr = std::move(addr);
        i.load_width = width;
        syms.push_back(std::move(i));
        return static_cast<int>(syms.size()) - 1;
    }
};

inline SymRef mk_const(std::uint64_t v) {
    auto e = std::make_shared<SymExpr>();
    e->kind = SymExpr::Kind::Const;
    e->cval = v;
    return e;
}

inline SymRef mk_sym(int id, int bits) {
    auto e = std::make_shared<SymExpr>();
    e->kind = SymExpr::Kind::Sym;
    e->sym = id;
    e->bits = bits;
    return e;
}

inline bool is_const(const SymRef& e) { return e->kind == SymExpr::Kind::Const; }

inline std::uint64_t apply_op(SymOp op, std::uint64_t a, std::uint64_t b) {
    switch (op) {
        case SymOp::Add: return a + b;
        case SymOp::Sub: return a - b;
        case SymOp::Mul: return a * b;
        case SymOp::And: return a & b;
        case SymOp::Or: return a | b;
        case SymOp::Xor: return a ^ b;
        case SymOp::Shl: return a << (b & 63);
        case SymOp::Shr: return a >> (b & 63);
        case SymOp::Eq: return a == b;
        case SymOp::Ne: return a != b;
        case SymOp::Lt: return a < b;
        case SymOp::Le: return a <= b;
        default: return 0;
    }
}

inline SymRef mk_bin(SymOp op, SymRef a, SymRef b) {
    if (is_const(a) && is_const(b)) return mk_const(apply_op(op, a->cval, b->cval));
    if (op == SymOp::Add && is_const(b) && b->cval == 0) return a;
    if (op == SymOp::Sub && is_const(b) && b->cval == 0) return a;
    auto e = std::make_shared<SymExpr>();
    e->kind = SymExpr::Kind::Op;
    e->op = op;
    e->kids = {std::move(a), std::move(b)};
    return e;
}

// Little-endian byte extraction from a 64-bit value expression.
inline SymRef mk_extract(SymRef v, int byte) {
    if (is_const(v)) return mk_const((v->cval >> (8 * byte)) & 0xFF);
    if (v->kind == SymExpr::Kind::Op && v->op == SymOp::Concat) {
        if (byte < static_cast<int>(v->kids.size())) return v->kids[byte];
        return mk_const(0);
    }
    if (v->kind == SymExpr::Kind::Sym && v->bits == 8)
        return byte == 0 ? v : mk_const(0);
    auto e = std::make_shared<SymExpr>();
    e->kind = SymExpr::Kind::Op;
    e->op = SymOp::Extract;
    e->byte = byte;
    e->kids = {std::move(v)};
    return e;
}

// Concatenate `width` byte expressions (little-endian) into a 64-bit value.
inline SymRef mk_concat(std::vector<SymRef> bytes) {
    bool allc = true;
    for (const auto& b : bytes) allc = allc && is_const(b);
    if (allc) {
        std::uint64_t v = 0;
        for (size_t i = 0; i < bytes.size(); ++i) v |= bytes[i]->cval << (8 * i);
        return mk_const(v);
    }
    if (bytes.size() == 1 && bytes[0]->kind == SymExpr::Kind::Sym && bytes[0]->bits == 8)
        return bytes[0];
    // Collapse Extract(x, 0..w-1) back into x when it covers the full value.
    bool same = bytes.size() == 8;
    for (size_t i = 0; same && i < bytes.size(); ++i) {
        const auto& b = bytes[i];
        same = b->kind == SymExpr::Kind::Op && b->op == SymOp::Extract &&
               b->byte == static_cast<int>(i) && b->kids[0] == bytes[0]->kids[0];
    }
    if (same) return bytes[0]->kids[0];
    auto e = std::make_shared<SymExpr>();
    e->kind = SymExpr::Kind::Op;
    e->op = SymOp::Concat;
    e->kids = std::move(bytes);
    return e;
}

inline void collect_syms(const SymRef& e, std::set<int>& out) {
    if (e->kind == SymExpr::Kind::Sym) out.insert(e->sym);
    for (const auto& k : e->kids) collect_syms(k, out);
}

inline std::string canon(const SymRef& e) {
    switch (e->kind) {
        case SymExpr::Kind::Const: return std::to_string(e->cval);
        case SymExpr::Kind::Sym: return "s" + std::to_string(e->sym);
        case SymExpr::Kind::Op: {
            std::string s = "(" + std::to_string(static_cast<int>(e->op));
            if (e->op == SymOp::Extract) s += "." + std::to_string(e->byte);
            for (const auto& k : e->kids) s += " " + canon(k);
            return s + ")";
        }
    }
    return "?";
}

struct Model {
    std::map<int, std::uint64_t> vals;
    std::uint64_t value_of(int sym, const SymbolTable& t,
                           const std::vector<std::uint8_t>* obj_defaults) const {
        auto it = vals.find(sym);
        if (it != vals.end()) return it->second;
        const auto& info = t.syms[sym];
        if (info.is_obj && obj_defaults && info.obj_index >= 0 &&
            info.obj_index < static_cast<std::int64_t>(obj_defaults->size()))
            return (*obj_defaults)[info.obj_index];
        return 0;
    }
};

inline std::uint64_t eval(const SymRef& e, const Model& m, const SymbolTable& t,
                          const std::vector<std::uint8_t>* obj_defaults) {
    switch (e->kind) {
        case SymExpr::Kind::Const: return e->cval;
        case SymExpr::Kind::Sym: {
            std::uint64_t v = m.value_of(e->sym, t, obj_defaults);
            int b = t.syms[e->sym].bits;
            return b >= 64 ? v : v & ((1ull << b) - 1);
        }
        case SymExpr::Kind::Op: {
            if (e->op == SymOp::Extract)
                return (eval(e->kids[0], m, t, obj_defaults) >> (8 * e->byte)) & 0xFF;
            if (e->op == SymOp::Concat) {
                std::uint64_t v = 0;
                for (size_t i = 0; i < e->kids.size(); ++i)
                    v |= (eval(e->kids[i], m, t, obj_defaults) & 0xFF) << (8 * i);
                return v;
            }
            return apply_op(e->op, eval(e->kids[0], m, t, obj_defaults),
                            eval(e->kids[1], m, t, obj_defaults));
        }
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Constraint solving: candidate search over symbol groups with a small-domain
// brute-force fallback. Sat answers always carry a checked model.

enum class SatStatus { Sat, Unsat, Fragment };

struct SatResult {
    SatStatus status = SatStatus::Unsat;
    Model model;
};

namespace symdetail {

// Union symbols that appear together in one atom (Sym or Concat of Syms).
struct Groups {
    std::map<int, int> parent;
    int find(int x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    }
    void unite(int a, int b) {
        parent.try_emplace(a, a);
        parent.try_emplace(b, b);
        parent[find(a)] = find(b);
    }
    void add(int a) { parent.try_emplace(a, a); }
};

inline bool atom_syms(const SymRef& e, std::vector<int>& out) {
    if (e->kind == SymExpr::Kind::Sym) {
        out.push_back(e->sym);
        return true;
    }
    if (e->kind == SymExpr::Kind::Op && e->op == SymOp::Concat) {
        for (const auto& k : e->kids) {
            if (k->kind != SymExpr::Kind::Sym) return false;
            out.push_back(k->sym);
        }
        return true;
    }
    return false;
}

// Assign a 64-bit word value across an ordered byte-symbol atom.
inline void assign_atom(Model& m, const std::vector<int>& syms, std::uint64_t v,
                        const SymbolTable& t) {
    if (syms.size() == 1 && t.syms[syms[0]].bits > 8) {
        m.vals[syms[0]] = v;
        return;
    }
    for (size_t i = 0; i < syms.size(); ++i) m.vals[syms[i]] = (v >> (8 * i)) & 0xFF;
}

// Collect candidate word values implied by comparisons against constants.
inline void candidates_from(const SymRef& e, const std::vector<int>& group_syms,
                            std::set<std::uint64_t>& out) {
    if (e->kind != SymExpr::Kind::Op) return;
    bool is_cmp = e->op == SymOp::Eq || e->op == SymOp::Ne || e->op == SymOp::Lt ||
                  e->op == SymOp::Le;
    if (is_cmp && e->kids.size() == 2) {
        for (int side = 0; side < 2; ++side) {
            const SymRef& l = e->kids[side];
            const SymRef& r = e->kids[1 - side];
            if (!is_const(r)) continue;
            std::uint64_t c = r->cval;
            std::vector<int> syms;
            auto mentions_group = [&](const SymRef& x) {
                std::set<int> s;
                collect_syms(x, s);
                for (int g : group_syms)
                    if (s.count(g)) return true;
                return false;
            };
            if (!mentions_group(l)) continue;
            if (atom_syms(l, syms)) {
                out.insert(c);
                out.insert(c + 1);
                out.insert(c - 1);
            } else if (l->kind == SymExpr::Kind::Op && l->kids.size() == 2 &&
                       is_const(l->kids[1])) {
                std::uint64_t k = l->kids[1]->cval;
                std::vector<int> inner;
                if (atom_syms(l->kids[0], inner)) {
                    switch (l->op) {
                        case SymOp::Add: out.insert(c - k); break;
                        case SymOp::Sub: out.insert(c + k); break;
                        case SymOp::Xor: out.insert(c ^ k); break;
                        case SymOp::And:
                            out.insert(k);       // sets exactly the masked bits
                            out.insert(c);
                            break;
                        default: break;
                    }
                }
            }
        }
    }
    for (const auto& k : e->kids) candidates_from(k, group_syms, out);
}

}  // namespace symdetail

inline SatResult check_sat(const std::vector<SymRef>& constraints, const SymbolTable& table,
                           const std::vector<std::uint8_t>* obj_defaults = nullptr) {
    SatResult res;
    std::set<int> all_syms;
    for (const auto& c : constraints) collect_syms(c, all_syms);

    auto holds_all = [&](const Model& m) {
        for (const auto& c : constraints)
            if (eval(c, m, table, obj_defaults) == 0) return false;
        return true;
    };

    Model empty;
    if (holds_all(empty)) {   // defaults (stale bytes / zeros) already satisfy
        res.status = SatStatus::Sat;
        res.model = empty;
        return res;
    }
    if (all_syms.empty()) {
        res.status = SatStatus::Unsat;
        return res;
    }

    // Group symbols that co-occur in atoms.
    symdetail::Groups g;
    for (int s : all_syms) g.add(s);
    std::vector<SymRef> stack(constraints.begin(), constraints.end());
    while (!stack.empty()) {
        SymRef e = stack.back();
        stack.pop_back();
        std::vector<int> syms;
        if (symdetail::atom_syms(e, syms) && syms.size() > 1)
            for (size_t i = 1; i < syms.size(); ++i) g.unite(syms[0], syms[i]);
        for (const auto& k : e->kids) stack.push_back(k);
    }
    std::map<int, std::vector<int>> groups;  // representative -> ordered syms
    for (int s : all_syms) groups[g.find(s)].push_back(s);

    struct GroupInfo {
        std::vector<int> syms;
        std::vector<std::uint64_t> cands;
    };
    std::vector<GroupInfo> gs;
    int index = 0;
    for (auto& [rep, syms] : groups) {
        std::sort(syms.begin(), syms.end());
        std::set<std::uint64_t> cset;
        for (const auto& c : constraints) symdetail::candidates_from(c, syms, cset);
        cset.insert(0);
        cset.insert(1);
        cset.insert(~0ull);
        GroupInfo gi;
        gi.syms = syms;
        // Deterministic spray address first: distinct per group and far from the
        // heap, so values used as pointers end up in disjoint sprayable regions.
        std::uint64_t spray = 0x5000000000ull + 0x10000ull * static_cast<std::uint64_t>(index);
        gi.cands.push_back(spray);
        for (std::uint64_t c : cset)
            if (c != spray) gi.cands.push_back(c);
        gs.push_back(std::move(gi));
        ++index;
    }

    // Depth-first product search with a bounded number of evaluations.
    std::uint64_t evals = 0;
    const std::uint64_t kMaxEvals = 2'000'000;
    Model m;
    bool exhausted = true;
    std::function<bool(size_t)> search = [&](size_t gi) -> bool {
        if (gi == gs.size()) {
            ++evals;
            return holds_all(m);
        }
        for (std::uint64_t v : gs[gi].cands) {
            if (evals > kMaxEvals) {
                exhausted = false;
                return false;
            }
            symdetail::assign_atom(m, gs[gi].syms, v, table);
            if (search(gi + 1)) return true;
        }
        for (int s : gs[gi].syms) m.vals.erase(s);
        return false;
    };
    if (search(0)) {
        res.status = SatStatus::Sat;
        res.model = m;
        return res;
    }

    // Small-domain fallback: exhaustive over up to 3 symbolic bytes.
    int total_bits = 0;
    for (int s : all_syms) total_bits += table.syms[s].bits;
    if (exhausted && total_bits <= 24) {
        std::vector<int> syms(all_syms.begin(), all_syms.end());
        std::function<bool(size_t, Model&)> brute = [&](size_t i, Model& bm) -> bool {
            if (i == syms.size()) return holds_all(bm);
            std::uint64_t lim = 1ull << table.syms[syms[i]].bits;
            for (std::uint64_t v = 0; v < lim; ++v) {
                bm.vals[syms[i]] = v;
                if (brute(i + 1, bm)) return true;
            }
            return false;
        };
        Model bm;
        if (brute(0, bm)) {
            res.status = SatStatus::Sat;
            res.model = bm;
        } else {
            res.status = SatStatus::Unsat;
        }
        return res;
    }

    // Detect plain equality contradictions on a single atom so the common
    // x==a && x==b case is a definitive Unsat rather than a fragment kill.
    {
        std::map<std::string, std::set<std::uint64_t>> eqs;
        bool simple = true;
        for (const auto& c : constraints) {
            if (c->kind == SymExpr::Kind::Op && c->op == SymOp::Eq &&
                is_const(c->kids[1])) {
                std::vector<int> syms;
                if (symdetail::atom_syms(c->kids[0], syms)) {
                    eqs[canon(c->kids[0])].insert(c->kids[1]->cval);
                    continue;
                }
            }
            simple = false;
        }
        if (simple) {
            for (const auto& [k, vs] : eqs)
                if (vs.size() > 1) {
                    res.status = SatStatus::Unsat;
                    return res;
                }
        }
    }

    res.status = SatStatus::Fragment;
    return res;
}

// ---------------------------------------------------------------------------
// Primitive classification

enum class PrimitiveKind { Uow, Aaw, Caw, Avw, Cvw, Fpd, If };

inline const char* primitive_name(PrimitiveKind k) {
    switch (k) {
        case PrimitiveKind::Uow: return "UOW";
        case PrimitiveKind::Aaw: return "AAW";
        case PrimitiveKind::Caw: return "CAW";
        case PrimitiveKind::Avw: return "AVW";
        case PrimitiveKind::Cvw: return "CVW";
        case PrimitiveKind::Fpd: return "FPD";
        case PrimitiveKind::If: return "IF";
    }
    return "?";
}

// Arbitrary vs constrained: does any (non-validity) path constraint mention a
// symbol of the operand expression?
inline bool constrained_by_path(const SymRef& expr, const std::vector<SymRef>& constraints,
                                const std::vector<bool>& validity) {
    std::set<int> esyms;
    collect_syms(expr, esyms);
    for (size_t i = 0; i < constraints.size(); ++i) {
        if (i < validity.size() && validity[i]) continue;
        std::set<int> cs;
        collect_syms(constraints[i], cs);
        for (int s : esyms)
            if (cs.count(s)) return true;
    }
    return false;
}

inline PrimitiveKind classify_address(const SymRef& addr, const std::vector<SymRef>& constraints,
                                      const std::vector<bool>& validity) {
    return constrained_by_path(addr, constraints, validity) ? PrimitiveKind::Caw
                                                            : PrimitiveKind::Aaw;
}

inline PrimitiveKind classify_value(const SymRef& value, const std::vector<SymRef>& constraints,
                                    const std::vector<bool>& validity) {
    return constrained_by_path(value, constraints, validity) ? PrimitiveKind::Cvw
                                                             : PrimitiveKind::Avw;
}

// ---------------------------------------------------------------------------
// Findings and exploration

struct Finding {
    PrimitiveKind primitive = PrimitiveKind::Uow;
    Loc site;
    std::vector<std::string> constraints;
    std::vector<std::uint8_t> object_bytes;           // replay refill
    std::map<std::uint64_t, std::uint8_t> spray;      // replay heap spray
    std::map<std::string, std::uint64_t> model;       // symbol name -> value
    std::uint64_t expected = 0;   // model address / value / icall target
    bool has_expected = false;
    bool validated = false;
    int context_id = 0;
    int trace_id = -1;
};

struct SymConfig {
    std::uint64_t state_budget = 4096;
    std::uint64_t step_budget = 1'000'000;
    int threshold_blocks = 40;
    int fork_cap = 2;   // visits per block per lineage
    bool validate = true;
};

struct ExploreResult {
    std::vector<Finding> findings;
    std::uint64_t states_explored = 0;
    std::uint64_t states_created = 0;
    int fragment_kills = 0;
    bool incomplete = false;
};

namespace symdetail {

struct SymFrame {
    int fn = -1;
    int block = 0;
    int instr = 0;
    std::map<std::uint32_t, SymRef> regs;
    std::uint32_t ret_reg = kNoReg;
};

struct SymState {
    std::vector<SymFrame> frames;
    std::map<std::uint64_t, SymRef> overlay;   // byte address -> 8-bit expr
    std::map<int, SymRef> globals;
    HeapModel heap;
    std::vector<SymRef> constraints;
    std::vector<bool> validity;
    std::map<std::string, int> read_memo;      // canon(addr):width -> mem sym
    std::map<std::pair<int, int>, int> visits;
    size_t cursor = 0;                          // guidance position
};

class Explorer {
public:
    Explorer(const Program& p, const Snapshot& snap, const Guidance::Trace* trace,
             SymConfig cfg)
        : prog_(p), snap_(snap), trace_(trace), cfg_(cfg) {}

    ExploreResult run() {
        const Allocation& a = snap_.machine.heap.allocs[snap_.vuln_alloc];
        oob_object_ = snap_.trigger.kind == ImpactKind::OobRead;
        region_lo_ = oob_object_ ? a.base - kRedzone : a.base;
        region_hi_ = oob_object_ ? a.base + a.size + kRedzone : a.base + a.size;
        obj_defaults_.clear();
        for (std::uint64_t addr = region_lo_; addr < region_hi_; ++addr)
            obj_defaults_.push_back(stale_byte(a, addr));

        SymState st;
        for (const auto& f : snap_.machine.stack) {
            SymFrame sf;
            sf.fn = f.fn;
            sf.block = f.block;
            sf.instr = f.instr;
            sf.ret_reg = f.ret_reg;
            for (const auto& [r, v] : f.regs) sf.regs[r] = mk_const(v);
            st.frames.push_back(std::move(sf));
        }
        for (size_t i = 0; i < snap_.machine.globals.size(); ++i)
            st.globals[static_cast<int>(i)] = mk_const(snap_.machine.globals[i]);
        st.heap = snap_.machine.heap;
        for (std::uint64_t addr = region_lo_; addr < region_hi_; ++addr)
            st.overlay[addr] = mk_sym(
                table_.fresh_obj(static_cast<std::int64_t>(addr - region_lo_)), 8);

        std::deque<SymState> worklist;
        worklist.push_back(std::move(st));
        result_.states_created = 1;
        std::uint64_t steps = 0;
        while (!worklist.empty()) {
            if (result_.states_explored >= cfg_.state_budget || steps >= cfg_.step_budget) {
                result_.incomplete = true;
                break;
            }
            SymState cur = std::move(worklist.front());
            worklist.pop_front();
            result_.states_explored++;
            run_state(std::move(cur), worklist, steps);
        }
        return std::move(result_);
    }

private:
    const Program& prog_;
    const Snapshot& snap_;
    const Guidance::Trace* trace_;
    SymConfig cfg_;
    ExploreResult result_;
    SymbolTable table_;
    bool oob_object_ = false;
    std::uint64_t region_lo_ = 0, region_hi_ = 0;
    std::vector<std::uint8_t> obj_defaults_;
    std::set<std::pair<std::string, int>> emitted_;  // (site, primitive)

    std::uint8_t stale_byte(const Allocation& a, std::uint64_t addr) const {
        std::int64_t off = static_cast<std::int64_t>(addr - a.base);
        if (off >= 0 && off < static_cast<std::int64_t>(a.size)) return a.bytes[off];
        if (off < 0) {
            int i = static_cast<int>(off + kRedzone);
            return a.lred_set[i] ? a.lred[i] : 0xAA;
        }
        int i = static_cast<int>(off - static_cast<std::int64_t>(a.size));
        return a.rred_set[i] ? a.rred[i] : 0xAA;
    }

    SymRef regval(SymState& st, std::uint32_t r) {
        auto& regs = st.frames.back().regs;
        auto it = regs.find(r);
        if (it == regs.end()) return mk_const(0);
        return it->second;
    }
    SymRef opval(SymState& st, const Operand& o) {
        return o.is_reg ? regval(st, o.reg) : mk_const(o.imm);
    }

    // Read one byte at a concrete address: overlay, then heap, else nullopt.
    std::optional<SymRef> concrete_byte(SymState& st, std::uint64_t addr) {
        auto it = st.overlay.find(addr);
        if (it != st.overlay.end()) return it->second;
        auto r = st.heap.resolve(addr);
        if (!r) return std::nullopt;
        const Allocation& a = st.heap.allocs[r->first];
        std::int64_t off = r->second;
        if (off >= 0 && off < static_cast<std::int64_t>(a.size))
            return mk_const(a.bytes[off]);
        if (off >= -kRedzone && off < static_cast<std::int64_t>(a.size) + kRedzone)
            return mk_const(stale_byte(a, addr));
        return std::nullopt;
    }

    bool sat_ok(SymState& st) {
        auto r = check_sat(st.constraints, table_, &obj_defaults_);
        if (r.status == SatStatus::Fragment) result_.fragment_kills++;
        return r.status == SatStatus::Sat;
    }

    void emit(SymState& st, PrimitiveKind prim, const Loc& site, const SymRef* expected,
              int trace_id) {
        auto key = std::make_pair(site.str(), static_cast<int>(prim));
        if (emitted_.count(key)) return;
        auto sat = check_sat(st.constraints, table_, &obj_defaults_);
        if (sat.status != SatStatus::Sat) {
            if (sat.status == SatStatus::Fragment) result_.fragment_kills++;
            return;
        }
        emitted_.insert(key);

        Finding f;
        f.primitive = prim;
        f.site = site;
        f.trace_id = trace_id;
        for (const auto& c : st.constraints) f.constraints.push_back(canon(c));
        for (const auto& [sym, v] : sat.model.vals) f.model[table_.syms[sym].name] = v;

        // Replay refill bytes for the symbolized region.
        f.object_bytes.resize(obj_defaults_.size());
        for (size_t i = 0; i < obj_defaults_.size(); ++i) f.object_bytes[i] = obj_defaults_[i];
        for (const auto& [sym, v] : sat.model.vals) {
            const auto& info = table_.syms[sym];
            if (info.is_obj && info.obj_index >= 0 &&
                info.obj_index < static_cast<std::int64_t>(f.object_bytes.size()))
                f.object_bytes[info.obj_index] = static_cast<std::uint8_t>(v);
        }
        // Heap spray: place every value this path loaded on demand at its model
        // address. Only this state's reads; the table is shared across states.
        for (const auto& memo : st.read_memo) {
            int s = memo.second;
            const auto& info = table_.syms[s];
            if (!info.load_addr) continue;
            std::uint64_t addr = eval(info.load_addr, sat.model, table_, &obj_defaults_);
            std::uint64_t v = sat.model.vals.count(s) ? sat.model.vals.at(s) : 0;
            for (int i = 0; i < info.load_width; ++i) {
                std::uint64_t b = addr + static_cast<std::uint64_t>(i);
                if (b >= region_lo_ && b < region_hi_) continue;  // object wins
                f.spray[b] = static_cast<std::uint8_t>(v >> (8 * i));
            }
        }
        if (expected) {
            f.expected = eval(*expected, sat.model, table_, &obj_defaults_);
            f.has_expected = true;
        }
        if (cfg_.validate) validate(f);
        result_.findings.push_back(std::move(f));
    }

    void validate(Finding& f) {
        ExecConfig cfg;
        cfg.record_events = true;
        ExecResult r;
        try {
            r = replay_with_bytes(prog_, snap_, f.object_bytes, cfg, f.spray);
        } catch (const Error&) {
            f.validated = false;
            return;
        }
        switch (f.primitive) {
            case PrimitiveKind::Uow:
                for (const auto& i : r.impacts)
                    if ((i.kind == ImpactKind::UafWrite || i.kind == ImpactKind::OobWrite) &&
                        i.loc == f.site)
                        f.validated = true;
                break;
            case PrimitiveKind::If:
                for (const auto& i : r.impacts)
                    if (i.kind == ImpactKind::InvalidFree && i.loc == f.site)
                        f.validated = true;
                for (const auto& e : r.events)
                    if (e.kind == EventKind::FreeCall && e.loc == f.site && f.has_expected &&
                        e.addr == f.expected)
                        f.validated = true;
                break;
            case PrimitiveKind::Aaw:
            case PrimitiveKind::Caw:
                for (const auto& e : r.events)
                    if (e.kind == EventKind::Store && e.loc == f.site && f.has_expected &&
                        e.addr == f.expected)
                        f.validated = true;
                break;
            case PrimitiveKind::Avw:
            case PrimitiveKind::Cvw:
                for (const auto& e : r.events)
                    if (e.kind == EventKind::Store && e.loc == f.site && f.has_expected &&
                        e.value == f.expected)
                        f.validated = true;
                break;
            case PrimitiveKind::Fpd:
                for (const auto& e : r.events)
                    if (e.kind == EventKind::Icall && e.loc == f.site && f.has_expected &&
                        e.addr == f.expected)
                        f.validated = true;
                break;
        }
    }

    SymRef load_symbolic_address(SymState& st, SymRef addr, int width, bool& killed) {
        killed = false;
        // Validity: the null page is never mapped. Flagged so classification
        // ignores it (every dereferenced address would otherwise count as
        // constrained).
        st.constraints.push_back(mk_bin(SymOp::Eq, mk_bin(SymOp::Lt, addr, mk_const(4096)),
                                        mk_const(0)));
        st.validity.push_back(true);
        if (!sat_ok(st)) {
            killed = true;
            return mk_const(0);
        }
        std::string key = canon(addr) + ":" + std::to_string(width);
        auto it = st.read_memo.find(key);
        int sym;
        if (it != st.read_memo.end()) {
            sym = it->second;
        } else {
            sym = table_.fresh_mem(addr, width);
            st.read_memo[key] = sym;
        }
        return mk_sym(sym, width * 8);
    }

    // Returns false when the state dies at this instruction.
    void run_state(SymState st, std::deque<SymState>& worklist, std::uint64_t& steps) {
        for (;;) {
            if (steps++ >= cfg_.step_budget) {
                result_.incomplete = true;
                return;
            }
            if (st.frames.empty()) return;  // scope: end of the snapshot syscall
            SymFrame& f = st.frames.back();
            const Function& fn = prog_.functions[f.fn];
            const Instr& in = fn.blocks[f.block].instrs[f.instr];
            Loc loc{fn.name, f.block, f.instr};

            switch (in.op) {
                case Opcode::Const:
                    f.regs[in.dst] = mk_const(in.a.imm);
                    break;
                case Opcode::Add: case Opcode::Sub: case Opcode::Mul:
                case Opcode::And: case Opcode::Or: case Opcode::Xor:
                case Opcode::Shl: case Opcode::Shr: {
                    SymOp op;
                    switch (in.op) {
                        case Opcode::Add: op = SymOp::Add; break;
                        case Opcode::Sub: op = SymOp::Sub; break;
                        case Opcode::Mul: op = SymOp::Mul; break;
                        case Opcode::And: op = SymOp::And; break;
                        case Opcode::Or: op = SymOp::Or; break;
                        case Opcode::Xor: op = SymOp::Xor; break;
                        case Opcode::Shl: op = SymOp::Shl; break;
                        default: op = SymOp::Shr; break;
                    }
                    f.regs[in.dst] = mk_bin(op, opval(st, in.a), opval(st, in.b));
                    break;
                }
                case Opcode::Cmp: {
                    SymOp op = SymOp::Eq;
                    switch (in.cmp) {
                        case CmpKind::Eq: op = SymOp::Eq; break;
                        case CmpKind::Ne: op = SymOp::Ne; break;
                        case CmpKind::Lt: op = SymOp::Lt; break;
                        case CmpKind::Le: op = SymOp::Le; break;
                    }
                    f.regs[in.dst] = mk_bin(op, opval(st, in.a), opval(st, in.b));
                    break;
                }
                case Opcode::Load: {
                    SymRef addr = mk_bin(SymOp::Add, regval(st, in.addr_reg),
                                         mk_const(static_cast<std::uint64_t>(in.addr_off)));
                    if (is_const(addr)) {
                        std::uint64_t a = addr->cval;
                        if (a < kNullPageEnd) return;  // concrete fault kills
                        std::vector<SymRef> bytes;
                        for (int i = 0; i < in.width; ++i) {
                            auto b = concrete_byte(st, a + i);
                            if (!b) return;  // unmapped: concrete fault
                            bytes.push_back(*b);
                        }
                        f.regs[in.dst] = mk_concat(std::move(bytes));
                    } else {
                        bool killed = false;
                        f.regs[in.dst] = load_symbolic_address(st, addr, in.width, killed);
                        if (killed) return;
                    }
                    break;
                }
                case Opcode::Store: {
                    SymRef addr = mk_bin(SymOp::Add, regval(st, in.addr_reg),
                                         mk_const(static_cast<std::uint64_t>(in.addr_off)));
                    SymRef val = opval(st, in.a);
                    if (is_const(addr)) {
                        std::uint64_t a = addr->cval;
                        if (a < kNullPageEnd) return;
                        auto r = st.heap.resolve(a);
                        if (!r && !st.overlay.count(a)) return;  // unmapped
                        bool uow = false;
                        if (r) {
                            const Allocation& al = st.heap.allocs[r->first];
                            std::int64_t off = r->second;
                            bool in_bounds =
                                off >= 0 && off + in.width <= static_cast<std::int64_t>(al.size);
                            uow = al.freed || !in_bounds;
                        }
                        if (uow) emit(st, PrimitiveKind::Uow, loc, nullptr, trace_id());
                        if (!is_const(val)) {
                            auto prim = classify_value(val, st.constraints, st.validity);
                            emit(st, prim, loc, &val, trace_id());
                        }
                        for (int i = 0; i < in.width; ++i)
                            st.overlay[a + i] = mk_extract(val, i);
                    } else {
                        auto aprim = classify_address(addr, st.constraints, st.validity);
                        emit(st, aprim, loc, &addr, trace_id());
                        if (!is_const(val)) {
                            auto vprim = classify_value(val, st.constraints, st.validity);
                            emit(st, vprim, loc, &val, trace_id());
                        }
                        // Destination unknown: no overlay update.
                    }
                    break;
                }
                case Opcode::Alloc: {
                    SymRef sz = opval(st, in.a);
                    std::uint64_t size = is_const(sz) ? sz->cval : 8;
                    if (size == 0 || size > (1 << 20)) size = 8;
                    Allocation& a = st.heap.alloc_at(size, loc);
                    f.regs[in.dst] = mk_const(a.base);
                    break;
                }
                case Opcode::Free: {
                    SymRef addr = regval(st, in.addr_reg);
                    if (!is_const(addr)) {
                        emit(st, PrimitiveKind::If, loc, &addr, trace_id());
                    } else {
                        auto r = st.heap.resolve(addr->cval);
                        if (r) {
                            Allocation& a = st.heap.allocs[r->first];
                            bool in_region = addr->cval >= region_lo_ && addr->cval < region_hi_;
                            if (a.freed || r->second != 0 || in_region)
                                emit(st, PrimitiveKind::If, loc, &addr, trace_id());
                            if (!a.freed && r->second == 0) a.freed = true;
                        }
                    }
                    break;
                }
                case Opcode::Gload:
                    f.regs[in.dst] = st.globals.count(prog_.global_index(in.name))
                                         ? st.globals[prog_.global_index(in.name)]
                                         : mk_const(0);
                    break;
                case Opcode::Gstore:
                    st.globals[prog_.global_index(in.name)] = opval(st, in.a);
                    break;
                case Opcode::Call: {
                    SymFrame nf;
                    nf.fn = prog_.function_index.at(in.name);
                    nf.ret_reg = in.dst;
                    const auto& params = prog_.functions[nf.fn].params;
                    for (size_t i = 0; i < params.size() && i < in.args.size(); ++i)
                        nf.regs[params[i]] = opval(st, in.args[i]);
                    f.instr++;
                    st.frames.push_back(std::move(nf));
                    continue;
                }
                case Opcode::Icall: {
                    SymRef target = regval(st, in.addr_reg);
                    if (!is_const(target)) {
                        emit(st, PrimitiveKind::Fpd, loc, &target, trace_id());
                        if (in.dst != kNoReg) {
                            bool killed = false;
                            f.regs[in.dst] =
                                load_symbolic_address(st, target, 8, killed);
                            if (killed) return;
                        }
                        break;
                    }
                    int fi = prog_.function_at_address(target->cval);
                    if (fi < 0 || prog_.functions[fi].params.size() != in.args.size())
                        return;  // concrete fault
                    SymFrame nf;
                    nf.fn = fi;
                    nf.ret_reg = in.dst;
                    const auto& params = prog_.functions[fi].params;
                    for (size_t i = 0; i < params.size() && i < in.args.size(); ++i)
                        nf.regs[params[i]] = opval(st, in.args[i]);
                    f.instr++;
                    st.frames.push_back(std::move(nf));
                    continue;
                }
                case Opcode::Br:
                    if (!enter(st, in.target1)) return;
                    continue;
                case Opcode::Condbr: {
                    SymRef cond = opval(st, in.a);
                    if (is_const(cond)) {
                        if (!enter(st, cond->cval != 0 ? in.target1 : in.target2)) return;
                        continue;
                    }
                    // Guidance: branches on the recorded trace are forced.
                    if (trace_ && st.cursor < trace_->branches.size() &&
                        trace_->branches[st.cursor].branch == loc) {
                        bool dir = trace_->branches[st.cursor].taken;
                        st.cursor++;
                        push_cond(st, cond, dir);
                        if (!sat_ok(st)) return;
                        if (!enter(st, dir ? in.target1 : in.target2)) return;
                        continue;
                    }
                    // Fork.
                    SymState other = st;
                    push_cond(st, cond, true);
                    push_cond(other, cond, false);
                    bool t_ok = sat_ok(st) && enter(st, in.target1);
                    bool f_ok = sat_ok(other) && enter(other, in.target2);
                    if (t_ok && f_ok) {
                        result_.states_created++;
                        worklist.push_back(std::move(other));
                    } else if (!t_ok && f_ok) {
                        st = std::move(other);
                    } else if (!t_ok && !f_ok) {
                        return;
                    }
                    continue;
                }
                case Opcode::Ret: {
                    SymRef rv = opval(st, in.a);
                    std::uint32_t rr = f.ret_reg;
                    st.frames.pop_back();
                    if (!st.frames.empty() && rr != kNoReg)
                        st.frames.back().regs[rr] = rv;
                    continue;
                }
                case Opcode::AssertFail:
                case Opcode::Nop:
                    break;
            }
            f.instr++;
        }
    }

    int trace_id() const { return trace_ ? trace_cursor_id_ : -1; }
    int trace_cursor_id_ = -1;

public:
    void set_trace_id(int id) { trace_cursor_id_ = id; }

private:
    void push_cond(SymState& st, const SymRef& cond, bool taken) {
        st.constraints.push_back(taken ? cond : mk_bin(SymOp::Eq, cond, mk_const(0)));
        st.validity.push_back(false);
    }

    bool enter(SymState& st, int target) {
        SymFrame& f = st.frames.back();
        auto key = std::make_pair(f.fn, target);
        if (++st.visits[key] > cfg_.fork_cap + 1) {
            result_.incomplete = true;
            return false;
        }
        f.block = target;
        f.instr = 0;
        return true;
    }
};

}  // namespace symdetail

inline ExploreResult explore(const Program& p, const Snapshot& snap,
                             const Guidance::Trace* trace, SymConfig cfg = {}) {
    symdetail::Explorer ex(p, snap, trace, cfg);
    return ex.run();
}

// Full sym stage for one snapshot: one guided run per far trace, plus a free
// run when any sink is near (or there is no guidance at all).
inline ExploreResult explore_with_guidance(const Program& p, const Snapshot& snap,
                                           const Guidance& guidance, SymConfig cfg = {}) {
    ExploreResult merged;
    std::set<std::pair<std::string, int>> seen;
    bool any_near = guidance.traces.empty();
    auto absorb = [&](const ExploreResult& r) {
        merged.states_explored += r.states_explored;
        merged.states_created += r.states_created;
        merged.fragment_kills += r.fragment_kills;
        merged.incomplete = merged.incomplete || r.incomplete;
        for (const auto& f : r.findings) {
            auto key = std::make_pair(f.site.str(), static_cast<int>(f.primitive));
            if (seen.insert(key).second) merged.findings.push_back(f);
        }
    };
    for (const auto& [id, trace] : guidance.traces) {
        if (trace.distance <= cfg.threshold_blocks) {
            any_near = true;
            continue;
        }
        symdetail::Explorer ex(p, snap, &trace, cfg);
        ex.set_trace_id(id);
        absorb(ex.run());
    }
    if (any_near) absorb(explore(p, snap, nullptr, cfg));
    return merged;
}

}  // namespace miniscope
