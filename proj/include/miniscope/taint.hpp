// Path-sensitive interprocedural taint analysis over MiniKernel IR.
// Starting from a vulnerable object and the flagged load, it enumerates
// potential high-risk sinks and records one representative branch trace per
// sink for the symbolic stage.
#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "miniscope/exec.hpp"
#include "miniscope/ir.hpp"

namespace miniscope {

struct VulnAnchor {
    std::string function;
    Loc instruction;      // the flagged load
    Loc alloc_site;
    std::uint64_t size = 0;
    std::int64_t offset = 0;       // access offset relative to the object base
    std::vector<Loc> call_trace;   // innermost-first call sites from the report
};

enum class PotentialKind { Fpd, WriteAddr, WriteValue, WriteToObject, FreeTainted };

inline const char* potential_kind_name(PotentialKind k) {
    switch (k) {
        case PotentialKind::Fpd: return "FPD";
        case PotentialKind::WriteAddr: return "WRITE_ADDR";
        case PotentialKind::WriteValue: return "WRITE_VALUE";
        case PotentialKind::WriteToObject: return "WRITE_TO_OBJECT";
        case PotentialKind::FreeTainted: return "FREE_TAINTED";
    }
    return "?";
}

struct PotentialImpact {
    PotentialKind kind = PotentialKind::Fpd;
    Loc sink;
    int distance = 0;
    int trace_id = 0;
};

struct GuidedBranch {
    std::string context;  // call-site chain at the branch
    Loc branch;
    bool taken = false;
};

struct Guidance {
    struct Trace {
        std::vector<GuidedBranch> branches;
        Loc sink;
        int distance = 0;
        PotentialKind kind = PotentialKind::Fpd;
    };
    std::map<int, Trace> traces;
    Loc farthest;
    int farthest_distance = -1;
};

struct TaintLimits {
    int call_string_depth = 3;
    int loop_unroll = 2;
    std::uint64_t max_steps = 500'000;
};

struct TaintResult {
    std::vector<PotentialImpact> impacts;
    Guidance guidance;
    bool complete = true;
};

constexpr int kUnreachable = 1 << 28;

// Shortest intraprocedural CFG path length in blocks (edge count).
inline int distance(const Program& p, const Loc& from, const Loc& to) {
    if (from.function != to.function) return kUnreachable;
    const Function* fn = p.find_function(from.function);
    if (!fn) return kUnreachable;
    std::vector<int> dist(fn->blocks.size(), -1);
    std::deque<int> q;
    dist[from.block] = 0;
    q.push_back(from.block);
    while (!q.empty()) {
        int b = q.front();
        q.pop_front();
        if (b == to.block) return dist[b];
        const Instr& term = fn->blocks[b].instrs.back();
        for (int t : {term.target1, term.target2}) {
            if (t >= 0 && dist[t] < 0) {
                dist[t] = dist[b] + 1;
                q.push_back(t);
            }
        }
    }
    return kUnreachable;
}

inline VulnAnchor locate_vuln_point(const Program& p, const Impact& report) {
    if (report.kind != ImpactKind::UafRead && report.kind != ImpactKind::OobRead)
        throw Error("AnchorNotFound: report is not a UAF/OOB read");
    const Function* fn = p.find_function(report.loc.function);
    if (!fn || report.loc.block >= static_cast<int>(fn->blocks.size()))
        throw Error("AnchorNotFound: report location is not in the program");
    const Block& bb = fn->blocks[report.loc.block];
    if (report.loc.instr >= static_cast<int>(bb.instrs.size()) ||
        bb.instrs[report.loc.instr].op != Opcode::Load)
        throw Error("AnchorNotFound: report location is not a load at " + report.loc.str());
    VulnAnchor a;
    a.function = report.loc.function;
    a.instruction = report.loc;
    a.alloc_site = report.alloc_site;
    a.size = report.alloc_size;
    a.offset = report.offset;
    a.call_trace = report.call_trace;
    return a;
}

// ---------------------------------------------------------------------------

namespace taintdetail {

struct AbsVal {
    bool tainted = false;
    enum class Base { Unknown, Obj, Root } base = Base::Unknown;
    std::int64_t off = 0;   // offset for Obj/Root bases
    int root = -1;          // alloc-site ordinal for Root

    static AbsVal top() { return {}; }
    static AbsVal taint() {
        AbsVal v;
        v.tainted = true;
        return v;
    }
    std::string digest() const {
        if (!tainted && base == Base::Unknown) return "";
        return std::string(tainted ? "t" : "") +
               (base == Base::Obj ? "O" + std::to_string(off)
                : base == Base::Root ? "R" + std::to_string(root) + "." + std::to_string(off)
                                     : "");
    }
};

struct TFrame {
    int fn = -1;
    int block = 0;
    int instr = 0;
    int start_block = 0;  // where analysis entered this frame segment
    std::map<std::uint32_t, AbsVal> regs;
    std::uint32_t ret_reg = kNoReg;
    Loc call_site;
};

struct Leg {
    std::string fn;
    int start = 0;
    int end = 0;
};

struct PathState {
    std::vector<TFrame> frames;
    std::vector<Leg> closed_legs;
    std::map<std::int64_t, AbsVal> obj_cells;              // object field -> value
    std::map<std::pair<int, std::int64_t>, AbsVal> root_cells;
    std::vector<GuidedBranch> branches;
    std::map<std::pair<int, int>, int> block_visits;  // (fn, block) -> count
    size_t up_index = 0;  // next entry of anchor call_trace to unwind into
};

class Analyzer {
public:
    Analyzer(const Program& p, const VulnAnchor& a, TaintLimits lim)
        : prog_(p), anchor_(a), lim_(lim) {}

    TaintResult run() {
        PathState st;
        TFrame f;
        f.fn = prog_.function_index.at(anchor_.function);
        f.block = anchor_.instruction.block;
        f.instr = anchor_.instruction.instr;
        f.start_block = anchor_.instruction.block;
        const Instr& ld = instr_at(f.fn, f.block, f.instr);
        AbsVal base;
        base.base = AbsVal::Base::Obj;
        base.off = anchor_.offset - ld.addr_off;
        f.regs[ld.addr_reg] = base;
        st.frames.push_back(std::move(f));
        walk(st);
        finish();
        return std::move(result_);
    }

private:
    const Program& prog_;
    const VulnAnchor& anchor_;
    TaintLimits lim_;
    TaintResult result_;
    std::uint64_t steps_ = 0;
    std::set<std::string> memo_;
    std::map<std::pair<std::string, int>, int> sink_ids_;  // (loc, kind) -> trace_id
    int next_trace_ = 0;

    const Instr& instr_at(int fn, int block, int instr) {
        return prog_.functions[fn].blocks[block].instrs[instr];
    }

    std::string context_string(const PathState& st) const {
        std::string s = "^" + std::to_string(st.up_index);
        for (size_t i = 1; i < st.frames.size(); ++i)
            s += ">" + st.frames[i].call_site.str();
        return s;
    }

    std::string truncated_context(const PathState& st) const {
        // Last `call_string_depth` call sites only, for memoization.
        std::vector<std::string> sites;
        for (size_t i = 1; i < st.frames.size(); ++i)
            sites.push_back(st.frames[i].call_site.str());
        std::string s = "^" + std::to_string(st.up_index);
        size_t first = sites.size() > static_cast<size_t>(lim_.call_string_depth)
                           ? sites.size() - lim_.call_string_depth
                           : 0;
        for (size_t i = first; i < sites.size(); ++i) s += ">" + sites[i];
        return s;
    }

    std::string state_digest(const PathState& st) const {
        const TFrame& f = st.frames.back();
        std::string s = prog_.functions[f.fn].name + "#" + std::to_string(f.block) + "#" +
                        std::to_string(f.instr) + "|";
        for (const auto& [r, v] : f.regs) {
            auto d = v.digest();
            if (!d.empty()) s += "r" + std::to_string(r) + "=" + d + ",";
        }
        s += "|";
        for (const auto& [off, v] : st.obj_cells) s += std::to_string(off) + "=" + v.digest() + ",";
        for (const auto& [k, v] : st.root_cells)
            s += std::to_string(k.first) + "." + std::to_string(k.second) + "=" + v.digest() + ",";
        s += "|" + std::to_string(st.frames.size());
        return s;
    }

    AbsVal eval(const TFrame& f, const Operand& o) {
        if (!o.is_reg) return AbsVal::top();
        auto it = f.regs.find(o.reg);
        return it == f.regs.end() ? AbsVal::top() : it->second;
    }

    static AbsVal combine(const AbsVal& a, const AbsVal& b, Opcode op, const Instr& in) {
        AbsVal r;
        r.tainted = a.tainted || b.tainted;
        // Pointer bases survive +/- of a constant-ish operand.
        if (op == Opcode::Add || op == Opcode::Sub) {
            if (a.base != AbsVal::Base::Unknown && !in.b.is_reg) {
                r.base = a.base;
                r.root = a.root;
                r.off = op == Opcode::Add ? a.off + static_cast<std::int64_t>(in.b.imm)
                                          : a.off - static_cast<std::int64_t>(in.b.imm);
            } else if (op == Opcode::Add && b.base != AbsVal::Base::Unknown && !in.a.is_reg) {
                r.base = b.base;
                r.root = b.root;
                r.off = b.off + static_cast<std::int64_t>(in.a.imm);
            } else if (a.base != AbsVal::Base::Unknown && in.b.is_reg && !b.tainted &&
                       b.base == AbsVal::Base::Unknown) {
                // base + unknown scalar: keep the base, offset becomes imprecise
                r.base = a.base;
                r.root = a.root;
                r.off = a.off;
            }
        }
        return r;
    }

    void record_sink(PathState& st, PotentialKind kind, const Loc& sink) {
        auto key = std::make_pair(sink.str(), static_cast<int>(kind));
        if (sink_ids_.count(key)) return;
        int id = next_trace_++;
        sink_ids_[key] = id;

        // Build the leg chain: closed legs plus the open leg ending at the sink.
        std::vector<Leg> legs = st.closed_legs;
        const TFrame& f = st.frames.back();
        legs.push_back({prog_.functions[f.fn].name, f.start_block, sink.block});
        int dist = 0;
        for (const auto& leg : legs) {
            Loc a{leg.fn, leg.start, 0}, b{leg.fn, leg.end, 0};
            int d = distance(prog_, a, b);
            if (d >= kUnreachable) {
                dist = kUnreachable;
                break;
            }
            dist += d;
        }

        PotentialImpact pi;
        pi.kind = kind;
        pi.sink = sink;
        pi.distance = dist;
        pi.trace_id = id;
        result_.impacts.push_back(pi);

        Guidance::Trace tr;
        tr.branches = st.branches;
        tr.sink = sink;
        tr.distance = dist;
        tr.kind = kind;
        result_.guidance.traces[id] = std::move(tr);
    }

    void finish() {
        for (const auto& pi : result_.impacts) {
            if (pi.distance > result_.guidance.farthest_distance &&
                pi.distance < kUnreachable) {
                result_.guidance.farthest_distance = pi.distance;
                result_.guidance.farthest = pi.sink;
            }
        }
    }

    bool enter_block(PathState& st, int target) {
        TFrame& f = st.frames.back();
        auto key = std::make_pair(f.fn, target);
        if (++st.block_visits[key] > lim_.loop_unroll + 1) return false;
        f.block = target;
        f.instr = 0;
        std::string memo_key = truncated_context(st) + "@" + state_digest(st);
        if (!memo_.insert(memo_key).second) return false;
        return true;
    }

    void walk(PathState st) {
        for (;;) {
            if (steps_++ > lim_.max_steps) {
                result_.complete = false;
                return;
            }
            TFrame& f = st.frames.back();
            const Function& fn = prog_.functions[f.fn];
            const Instr& in = fn.blocks[f.block].instrs[f.instr];
            Loc loc{fn.name, f.block, f.instr};

            switch (in.op) {
                case Opcode::Const:
                    f.regs[in.dst] = AbsVal::top();
                    break;
                case Opcode::Add:
                case Opcode::Sub:
                case Opcode::Mul:
                case Opcode::And:
                case Opcode::Or:
                case Opcode::Xor:
                case Opcode::Shl:
                case Opcode::Shr:
                case Opcode::Cmp:
                    f.regs[in.dst] = combine(eval(f, in.a), eval(f, in.b), in.op, in);
                    break;
                case Opcode::Load: {
                    AbsVal base = f.regs.count(in.addr_reg) ? f.regs[in.addr_reg]
                                                            : AbsVal::top();
                    AbsVal v;
                    if (base.base == AbsVal::Base::Obj) {
                        std::int64_t off = base.off + in.addr_off;
                        auto it = st.obj_cells.find(off);
                        v = it != st.obj_cells.end() ? it->second : AbsVal::taint();
                    } else if (base.base == AbsVal::Base::Root) {
                        auto it = st.root_cells.find({base.root, base.off + in.addr_off});
                        v = it != st.root_cells.end() ? it->second : AbsVal::top();
                    } else if (base.tainted) {
                        v = AbsVal::taint();
                    }
                    f.regs[in.dst] = v;
                    break;
                }
                case Opcode::Store: {
                    AbsVal base = f.regs.count(in.addr_reg) ? f.regs[in.addr_reg]
                                                            : AbsVal::top();
                    AbsVal val = eval(f, in.a);
                    if (base.base == AbsVal::Base::Obj)
                        record_sink(st, PotentialKind::WriteToObject, loc);
                    if (base.tainted) record_sink(st, PotentialKind::WriteAddr, loc);
                    if (val.tainted) record_sink(st, PotentialKind::WriteValue, loc);
                    if (base.base == AbsVal::Base::Obj)
                        st.obj_cells[base.off + in.addr_off] = val;
                    else if (base.base == AbsVal::Base::Root)
                        st.root_cells[{base.root, base.off + in.addr_off}] = val;
                    break;
                }
                case Opcode::Alloc: {
                    AbsVal v;
                    v.base = AbsVal::Base::Root;
                    v.root = next_root_++;
                    f.regs[in.dst] = v;
                    break;
                }
                case Opcode::Free: {
                    AbsVal a = f.regs.count(in.addr_reg) ? f.regs[in.addr_reg] : AbsVal::top();
                    if (a.tainted) record_sink(st, PotentialKind::FreeTainted, loc);
                    break;
                }
                case Opcode::Gload:
                    f.regs[in.dst] = AbsVal::top();
                    break;
                case Opcode::Gstore:
                    break;
                case Opcode::Call: {
                    int callee = prog_.function_index.at(in.name);
                    TFrame nf;
                    nf.fn = callee;
                    nf.start_block = 0;
                    nf.call_site = loc;
                    nf.ret_reg = in.dst;
                    const auto& params = prog_.functions[callee].params;
                    for (size_t i = 0; i < params.size() && i < in.args.size(); ++i)
                        nf.regs[params[i]] = eval(f, in.args[i]);
                    st.closed_legs.push_back({fn.name, f.start_block, f.block});
                    f.instr++;
                    st.frames.push_back(std::move(nf));
                    continue;
                }
                case Opcode::Icall: {
                    AbsVal t = f.regs.count(in.addr_reg) ? f.regs[in.addr_reg] : AbsVal::top();
                    if (t.tainted) record_sink(st, PotentialKind::Fpd, loc);
                    // Targets are not resolved statically; result unknown.
                    if (in.dst != kNoReg) f.regs[in.dst] = AbsVal::top();
                    break;
                }
                case Opcode::Br:
                    if (!enter_block(st, in.target1)) return;
                    continue;
                case Opcode::Condbr: {
                    for (bool dir : {true, false}) {
                        PathState copy = st;
                        copy.branches.push_back({context_string(st), loc, dir});
                        if (enter_block(copy, dir ? in.target1 : in.target2))
                            walk(std::move(copy));
                    }
                    return;
                }
                case Opcode::Ret: {
                    AbsVal rv = eval(f, in.a);
                    if (st.frames.size() > 1) {
                        std::uint32_t rr = f.ret_reg;
                        int exit_block = f.block;
                        std::string callee_name = fn.name;
                        st.frames.pop_back();
                        // Propagate pointer bindings of entry params back to the
                        // caller's argument registers (object identity flows up).
                        st.closed_legs.push_back({callee_name, 0, exit_block});
                        TFrame& back = st.frames.back();
                        back.start_block = back.block;
                        if (rr != kNoReg) back.regs[rr] = rv;
                        continue;
                    }
                    // Returning above the analysis root: unwind along the
                    // report's call trace so caller-side sinks are reachable.
                    if (st.up_index < anchor_.call_trace.size()) {
                        Loc site = anchor_.call_trace[st.up_index++];
                        const Function* caller = prog_.find_function(site.function);
                        if (!caller) return;
                        const Instr& callin =
                            caller->blocks[site.block].instrs[site.instr];
                        TFrame cf;
                        cf.fn = prog_.function_index.at(site.function);
                        cf.block = site.block;
                        cf.instr = site.instr + 1;
                        cf.start_block = site.block;
                        // Bind caller argument registers that fed object-based
                        // or tainted params of the frame we are leaving.
                        for (size_t i = 0;
                             i < fn.params.size() && i < callin.args.size(); ++i) {
                            if (!callin.args[i].is_reg) continue;
                            auto it = f.regs.find(fn.params[i]);
                            if (it == f.regs.end()) continue;
                            // Only entry bindings matter; conservative: copy
                            // current binding when it carries the object base.
                            if (it->second.base == AbsVal::Base::Obj)
                                cf.regs[callin.args[i].reg] = it->second;
                        }
                        if (callin.dst != kNoReg) cf.regs[callin.dst] = rv;
                        st.closed_legs.push_back({fn.name, f.start_block, f.block});
                        st.frames.pop_back();
                        st.frames.push_back(std::move(cf));
                        continue;
                    }
                    return;
                }
                case Opcode::AssertFail:
                case Opcode::Nop:
                    break;
            }
            f.instr++;
        }
    }

    int next_root_ = 0;
};

}  // namespace taintdetail

inline TaintResult estimate_hidden_impacts(const Program& p, const VulnAnchor& a,
                                           TaintLimits lim = {}) {
    taintdetail::Analyzer an(p, a, lim);
    return an.run();
}

}  // namespace miniscope
