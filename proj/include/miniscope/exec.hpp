// Deterministic concrete interpreter with a shadow-memory sanitizer,
// multi-shot impact recording, coverage collection and state snapshots.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "miniscope/ir.hpp"

namespace miniscope {

constexpr int kRedzone = 16;
constexpr std::uint64_t kHeapBase = 0x100000000ull;
constexpr std::uint64_t kNullPageEnd = 4096;
constexpr int kCallDepthCap = 256;

enum class ImpactKind {
    OobRead, OobWrite, UafRead, UafWrite, InvalidFree,
    Gpf, NullDeref, DivZero, Warn, Bug,
};

enum class AccessKind { None, Read, Write, Free };

inline const char* impact_kind_name(ImpactKind k) {
    switch (k) {
        case ImpactKind::OobRead: return "OOB_READ";
        case ImpactKind::OobWrite: return "OOB_WRITE";
        case ImpactKind::UafRead: return "UAF_READ";
        case ImpactKind::UafWrite: return "UAF_WRITE";
        case ImpactKind::InvalidFree: return "INVALID_FREE";
        case ImpactKind::Gpf: return "GPF";
        case ImpactKind::NullDeref: return "NULL_DEREF";
        case ImpactKind::DivZero: return "DIV_ZERO";
        case ImpactKind::Warn: return "WARN";
        case ImpactKind::Bug: return "BUG";
    }
    return "?";
}

inline bool is_irrecoverable(ImpactKind k) {
    return k == ImpactKind::Gpf || k == ImpactKind::NullDeref;
}

inline bool is_memory_write_impact(ImpactKind k) {
    return k == ImpactKind::OobWrite || k == ImpactKind::UafWrite ||
           k == ImpactKind::InvalidFree;
}

struct Impact {
    ImpactKind kind = ImpactKind::Warn;
    AccessKind access = AccessKind::None;
    int width = 0;
    Loc loc;
    std::vector<Loc> call_trace;  // innermost-first call sites
    int vuln_alloc = -1;          // allocation id, -1 if none
    std::int64_t offset = 0;      // access offset relative to allocation base
    Loc alloc_site;               // allocation site of the vulnerable object
    std::uint64_t alloc_size = 0;
    std::uint64_t seq = 0;        // execution-order index
    std::uint64_t fault_addr = 0;
};

struct Allocation {
    int id = -1;
    std::uint64_t base = 0;
    std::uint64_t size = 0;
    bool freed = false;
    Loc alloc_site;
    Loc free_site;
    std::vector<std::uint8_t> bytes;
    // Redzone side-buffers: OOB writes land here, OOB reads see them.
    std::array<std::uint8_t, kRedzone> lred{}, rred{};
    std::array<bool, kRedzone> lred_set{}, rred_set{};
};

struct HeapModel {
    std::vector<Allocation> allocs;
    std::uint64_t next_base = kHeapBase;

    // Returns (alloc index, signed offset from base) for an address that falls
    // inside an allocation's [-redzone, size+redzone) window, else nullopt.
    std::optional<std::pair<int, std::int64_t>> resolve(std::uint64_t addr) const {
        for (const auto& a : allocs) {
            std::uint64_t lo = a.base - kRedzone;
            std::uint64_t hi = a.base + a.size + kRedzone;
            if (addr >= lo && addr < hi)
                return std::make_pair(a.id, static_cast<std::int64_t>(addr - a.base));
        }
        return std::nullopt;
    }

    Allocation& alloc_at(std::uint64_t size, const Loc& site) {
        Allocation a;
        a.id = static_cast<int>(allocs.size());
        a.base = next_base + kRedzone;
        a.size = size;
        a.alloc_site = site;
        a.bytes.assign(size, 0);
        std::uint64_t span = kRedzone + size + kRedzone;
        next_base += (span + 15) / 16 * 16 + 16;
        allocs.push_back(std::move(a));
        return allocs.back();
    }
};

struct ExecConfig {
    bool multi_shot = true;
    std::uint64_t step_budget = 1'000'000;
    std::uint8_t poison = 0xAA;
    bool record_events = false;
};

enum class Outcome { Completed, KilledIrrecoverable, BudgetExhausted };

struct Edge {
    std::string fn;
    int from = -1, to = -1;
    friend bool operator<(const Edge& a, const Edge& b) {
        if (a.fn != b.fn) return a.fn < b.fn;
        if (a.from != b.from) return a.from < b.from;
        return a.to < b.to;
    }
    friend bool operator==(const Edge& a, const Edge& b) {
        return a.fn == b.fn && a.from == b.from && a.to == b.to;
    }
};

enum class EventKind { Store, Icall, FreeCall };

// Raw memory/control events, recorded for replay validation.
struct Event {
    EventKind kind = EventKind::Store;
    Loc loc;
    std::uint64_t addr = 0;   // store target / icall target / freed pointer
    std::uint64_t value = 0;  // stored value
    int width = 0;
    std::uint64_t seq = 0;
};

struct ExecResult {
    std::vector<Impact> impacts;
    std::set<Edge> coverage;
    std::uint64_t steps = 0;
    Outcome outcome = Outcome::Completed;
    std::vector<Event> events;

    bool has_impact_kind(ImpactKind k) const {
        for (const auto& i : impacts)
            if (i.kind == k) return true;
        return false;
    }
};

// ---------------------------------------------------------------------------
// Machine state

struct Frame {
    int fn = -1;
    int block = 0;
    int instr = 0;
    std::unordered_map<std::uint32_t, std::uint64_t> regs;
    Loc call_site;               // site in the caller, invalid for the outermost frame
    std::uint32_t ret_reg = kNoReg;
};

struct Machine {
    const Program* prog = nullptr;
    std::vector<std::uint64_t> globals;
    HeapModel heap;
    std::vector<Frame> stack;
    TestCase testcase;
    size_t call_index = 0;  // next testcase call to start once the stack empties
    // Sprayed guest memory outside the heap (attacker-planted payloads).
    std::map<std::uint64_t, std::uint8_t> spray;

    void init(const Program& p, const TestCase& tc) {
        prog = &p;
        globals.assign(p.globals.size(), 0);
        testcase = tc;
        call_index = 0;
    }
};

struct Snapshot {
    Machine machine;
    int vuln_alloc = -1;
    Impact trigger;
};

// ---------------------------------------------------------------------------
// Interpreter

class Executor {
public:
    Executor(const Program& p, ExecConfig cfg) : prog_(p), cfg_(cfg) {}

    // Snapshot hook: called immediately before a flagged UAF/OOB read executes.
    // Return true to request a freeze; the executor stores the machine copy.
    using FreezeHook = bool (*)(void*, const Impact&);
    void set_freeze_hook(FreezeHook hook, void* ctx) {
        freeze_hook_ = hook;
        freeze_ctx_ = ctx;
    }
    std::optional<Snapshot> taken_snapshot() { return std::move(frozen_); }

    ExecResult run(const TestCase& tc) {
        Machine m;
        m.init(prog_, tc);
        return resume(m);
    }

    // Continue execution from an arbitrary machine state.
    ExecResult resume(Machine m) {
        machine_ = std::move(m);
        result_ = ExecResult{};
        seq_ = 0;
        stop_ = false;
        while (!stop_) {
            if (machine_.stack.empty()) {
                if (machine_.call_index >= machine_.testcase.calls.size()) break;
                const auto& call = machine_.testcase.calls[machine_.call_index++];
                int fi = machine_.prog->function_index.at(call.syscall);
                push_frame(fi, call.args, Loc{}, kNoReg);
                continue;
            }
            step();
        }
        return std::move(result_);
    }

private:
    const Program& prog_;
    ExecConfig cfg_;
    Machine machine_;
    ExecResult result_;
    std::uint64_t seq_ = 0;
    bool stop_ = false;
    FreezeHook freeze_hook_ = nullptr;
    void* freeze_ctx_ = nullptr;
    std::optional<Snapshot> frozen_;

    Frame& frame() { return machine_.stack.back(); }
    const Function& cur_fn() { return prog_.functions[frame().fn]; }

    Loc here() {
        return Loc{cur_fn().name, frame().block, frame().instr};
    }

    std::vector<Loc> call_trace() {
        std::vector<Loc> tr;
        for (auto it = machine_.stack.rbegin(); it != machine_.stack.rend(); ++it) {
            auto next = std::next(it);
            if (next != machine_.stack.rend()) tr.push_back(it->call_site);
        }
        return tr;
    }

    void push_frame(int fi, const std::vector<std::uint64_t>& args, Loc call_site,
                    std::uint32_t ret_reg) {
        Frame f;
        f.fn = fi;
        f.call_site = call_site;
        f.ret_reg = ret_reg;
        const auto& fn = prog_.functions[fi];
        for (size_t i = 0; i < fn.params.size() && i < args.size(); ++i)
            f.regs[fn.params[i]] = args[i];
        machine_.stack.push_back(std::move(f));
    }

    std::uint64_t operand(const Operand& o) {
        return o.is_reg ? frame().regs[o.reg] : o.imm;
    }

    void record_impact(ImpactKind kind, AccessKind access, int width, const Loc& loc,
                       int vuln_alloc, std::int64_t offset, std::uint64_t fault_addr) {
        Impact imp;
        imp.kind = kind;
        imp.access = access;
        imp.width = width;
        imp.loc = loc;
        imp.call_trace = call_trace();
        imp.vuln_alloc = vuln_alloc;
        imp.offset = offset;
        if (vuln_alloc >= 0) {
            const Allocation& a = machine_.heap.allocs[vuln_alloc];
            imp.alloc_site = a.alloc_site;
            imp.alloc_size = a.size;
        }
        imp.seq = seq_;
        imp.fault_addr = fault_addr;
        result_.impacts.push_back(std::move(imp));
        if (is_irrecoverable(kind)) {
            result_.outcome = Outcome::KilledIrrecoverable;
            stop_ = true;
        } else if (!cfg_.multi_shot) {
            result_.outcome = Outcome::Completed;
            stop_ = true;
        }
    }

    // Classify + perform a read of [addr, addr+width). Returns the loaded value
    // (poison / stale bytes for recoverable violations).
    std::uint64_t mem_read(std::uint64_t addr, int width, const Loc& loc, bool& killed) {
        killed = false;
        if (addr < kNullPageEnd) {
            record_impact(ImpactKind::NullDeref, AccessKind::Read, width, loc, -1, 0, addr);
            killed = true;
            return 0;
        }
        auto r = machine_.heap.resolve(addr);
        if (!r) {
            // Sprayed memory behaves as plain mapped bytes.
            if (spray_covers(addr, width)) return spray_read(addr, width);
            record_impact(ImpactKind::Gpf, AccessKind::Read, width, loc, -1, 0, addr);
            killed = true;
            return 0;
        }
        auto [ai, off] = *r;
        Allocation& a = machine_.heap.allocs[ai];
        std::int64_t end = off + width;
        bool in_bounds = off >= 0 && end <= static_cast<std::int64_t>(a.size);
        if (end > static_cast<std::int64_t>(a.size) + kRedzone || off < -kRedzone) {
            record_impact(ImpactKind::Gpf, AccessKind::Read, width, loc, -1, 0, addr);
            killed = true;
            return 0;
        }

        // Flagged read of a vulnerable object: give the snapshot hook a chance
        // to freeze BEFORE the load takes effect.
        if ((a.freed || !in_bounds) && freeze_hook_) {
            Impact probe;
            probe.kind = a.freed ? ImpactKind::UafRead : ImpactKind::OobRead;
            probe.access = AccessKind::Read;
            probe.width = width;
            probe.loc = loc;
            probe.call_trace = call_trace();
            probe.vuln_alloc = a.id;
            probe.offset = off;
            probe.alloc_site = a.alloc_site;
            probe.alloc_size = a.size;
            probe.seq = seq_;
            probe.fault_addr = addr;
            if (freeze_hook_(freeze_ctx_, probe)) {
                Snapshot s;
                s.machine = machine_;
                s.vuln_alloc = a.id;
                s.trigger = probe;
                frozen_ = std::move(s);
                freeze_hook_ = nullptr;
                stop_ = true;
                killed = true;
                return 0;
            }
        }

        std::uint64_t v = 0;
        for (int i = 0; i < width; ++i)
            v |= static_cast<std::uint64_t>(byte_at(a, off + i)) << (8 * i);
        if (a.freed) {
            record_impact(ImpactKind::UafRead, AccessKind::Read, width, loc, a.id, off, addr);
        } else if (!in_bounds) {
            record_impact(ImpactKind::OobRead, AccessKind::Read, width, loc, a.id, off, addr);
        }
        return v;
    }

    std::uint8_t byte_at(const Allocation& a, std::int64_t off) {
        if (off >= 0 && off < static_cast<std::int64_t>(a.size)) return a.bytes[off];
        if (off < 0) {
            int i = static_cast<int>(off + kRedzone);
            return a.lred_set[i] ? a.lred[i] : cfg_.poison;
        }
        int i = static_cast<int>(off - static_cast<std::int64_t>(a.size));
        return a.rred_set[i] ? a.rred[i] : cfg_.poison;
    }

    void mem_write(std::uint64_t addr, std::uint64_t value, int width, const Loc& loc,
                   bool& killed) {
        killed = false;
        if (cfg_.record_events)
            result_.events.push_back({EventKind::Store, loc, addr, value, width, seq_});
        if (addr < kNullPageEnd) {
            record_impact(ImpactKind::NullDeref, AccessKind::Write, width, loc, -1, 0, addr);
            killed = true;
            return;
        }
        auto r = machine_.heap.resolve(addr);
        if (!r) {
            if (spray_covers(addr, width)) {
                for (int i = 0; i < width; ++i)
                    machine_.spray[addr + i] = static_cast<std::uint8_t>(value >> (8 * i));
                return;
            }
            record_impact(ImpactKind::Gpf, AccessKind::Write, width, loc, -1, 0, addr);
            killed = true;
            return;
        }
        auto [ai, off] = *r;
        Allocation& a = machine_.heap.allocs[ai];
        std::int64_t end = off + width;
        bool in_bounds = off >= 0 && end <= static_cast<std::int64_t>(a.size);
        if (end > static_cast<std::int64_t>(a.size) + kRedzone || off < -kRedzone) {
            record_impact(ImpactKind::Gpf, AccessKind::Write, width, loc, -1, 0, addr);
            killed = true;
            return;
        }
        if (a.freed) {
            // Quarantine: stale bytes stay as they were at free time.
            record_impact(ImpactKind::UafWrite, AccessKind::Write, width, loc, a.id, off, addr);
            return;
        }
        if (!in_bounds) {
            for (int i = 0; i < width; ++i) {
                std::int64_t o = off + i;
                std::uint8_t b = static_cast<std::uint8_t>(value >> (8 * i));
                if (o < 0) {
                    int j = static_cast<int>(o + kRedzone);
                    a.lred[j] = b;
                    a.lred_set[j] = true;
                } else if (o >= static_cast<std::int64_t>(a.size)) {
                    int j = static_cast<int>(o - static_cast<std::int64_t>(a.size));
                    a.rred[j] = b;
                    a.rred_set[j] = true;
                } else {
                    a.bytes[o] = b;
                }
            }
            record_impact(ImpactKind::OobWrite, AccessKind::Write, width, loc, a.id, off, addr);
            return;
        }
        for (int i = 0; i < width; ++i)
            a.bytes[off + i] = static_cast<std::uint8_t>(value >> (8 * i));
    }

    bool spray_covers(std::uint64_t addr, int width) {
        for (int i = 0; i < width; ++i)
            if (!machine_.spray.count(addr + i)) return false;
        return width > 0;
    }
    std::uint64_t spray_read(std::uint64_t addr, int width) {
        std::uint64_t v = 0;
        for (int i = 0; i < width; ++i)
            v |= static_cast<std::uint64_t>(machine_.spray[addr + i]) << (8 * i);
        return v;
    }

    void do_free(std::uint64_t addr, const Loc& loc) {
        if (cfg_.record_events)
            result_.events.push_back({EventKind::FreeCall, loc, addr, 0, 0, seq_});
        if (addr < kNullPageEnd) {
            record_impact(ImpactKind::NullDeref, AccessKind::Free, 0, loc, -1, 0, addr);
            return;
        }
        auto r = machine_.heap.resolve(addr);
        if (!r) {
            record_impact(ImpactKind::Gpf, AccessKind::Free, 0, loc, -1, 0, addr);
            return;
        }
        auto [ai, off] = *r;
        Allocation& a = machine_.heap.allocs[ai];
        if (a.freed || off != 0) {
            record_impact(ImpactKind::InvalidFree, AccessKind::Free, 0, loc, a.id, off, addr);
            return;
        }
        a.freed = true;
        a.free_site = loc;
    }

    void take_edge(int to) {
        result_.coverage.insert(Edge{cur_fn().name, frame().block, to});
        frame().block = to;
        frame().instr = 0;
    }

    void do_return(std::uint64_t value) {
        std::uint32_t ret_reg = frame().ret_reg;
        machine_.stack.pop_back();
        if (!machine_.stack.empty() && ret_reg != kNoReg) frame().regs[ret_reg] = value;
    }

    void abort_syscall() {
        machine_.stack.clear();
    }

    void step() {
        if (result_.steps >= cfg_.step_budget) {
            result_.outcome = Outcome::BudgetExhausted;
            stop_ = true;
            return;
        }
        ++result_.steps;
        ++seq_;

        const Function& fn = cur_fn();
        const Block& bb = fn.blocks[frame().block];
        if (frame().instr >= static_cast<int>(bb.instrs.size())) {
            // Validation guarantees a terminator; treat as malformed IR.
            abort_syscall();
            return;
        }
        const Instr& in = bb.instrs[frame().instr];
        Loc loc = here();
        bool killed = false;

        switch (in.op) {
            case Opcode::Const:
                frame().regs[in.dst] = in.a.imm;
                break;
            case Opcode::Add:
                frame().regs[in.dst] = operand(in.a) + operand(in.b);
                break;
            case Opcode::Sub:
                frame().regs[in.dst] = operand(in.a) - operand(in.b);
                break;
            case Opcode::Mul:
                frame().regs[in.dst] = operand(in.a) * operand(in.b);
                break;
            case Opcode::And:
                frame().regs[in.dst] = operand(in.a) & operand(in.b);
                break;
            case Opcode::Or:
                frame().regs[in.dst] = operand(in.a) | operand(in.b);
                break;
            case Opcode::Xor:
                frame().regs[in.dst] = operand(in.a) ^ operand(in.b);
                break;
            case Opcode::Shl:
                frame().regs[in.dst] = operand(in.a) << (operand(in.b) & 63);
                break;
            case Opcode::Shr:
                frame().regs[in.dst] = operand(in.a) >> (operand(in.b) & 63);
                break;
            case Opcode::Cmp: {
                std::uint64_t a = operand(in.a), b = operand(in.b);
                bool v = false;
                switch (in.cmp) {
                    case CmpKind::Eq: v = a == b; break;
                    case CmpKind::Ne: v = a != b; break;
                    case CmpKind::Lt: v = a < b; break;
                    case CmpKind::Le: v = a <= b; break;
                }
                frame().regs[in.dst] = v ? 1 : 0;
                break;
            }
            case Opcode::Load: {
                std::uint64_t addr =
                    frame().regs[in.addr_reg] + static_cast<std::uint64_t>(in.addr_off);
                std::uint64_t v = mem_read(addr, in.width, loc, killed);
                if (killed || stop_) return;
                frame().regs[in.dst] = v;
                break;
            }
            case Opcode::Store: {
                std::uint64_t addr =
                    frame().regs[in.addr_reg] + static_cast<std::uint64_t>(in.addr_off);
                mem_write(addr, operand(in.a), in.width, loc, killed);
                if (killed || stop_) return;
                break;
            }
            case Opcode::Alloc: {
                std::uint64_t size = operand(in.a);
                if (size == 0 || size > (1 << 20)) size = 8;  // clamp nonsense sizes
                Allocation& a = machine_.heap.alloc_at(size, loc);
                frame().regs[in.dst] = a.base;
                break;
            }
            case Opcode::Free:
                do_free(frame().regs[in.addr_reg], loc);
                if (stop_) return;
                break;
            case Opcode::Gload:
                frame().regs[in.dst] = machine_.globals[prog_.global_index(in.name)];
                break;
            case Opcode::Gstore:
                machine_.globals[prog_.global_index(in.name)] = operand(in.a);
                break;
            case Opcode::Call: {
                if (static_cast<int>(machine_.stack.size()) >= kCallDepthCap) {
                    record_impact(ImpactKind::Bug, AccessKind::None, 0, loc, -1, 0, 0);
                    if (stop_) return;
                    abort_syscall();
                    return;
                }
                std::vector<std::uint64_t> args;
                for (const auto& a : in.args) args.push_back(operand(a));
                frame().instr++;  // resume after the call on return
                push_frame(prog_.function_index.at(in.name), args, loc, in.dst);
                return;
            }
            case Opcode::Icall: {
                std::uint64_t target = frame().regs[in.addr_reg];
                if (cfg_.record_events)
                    result_.events.push_back({EventKind::Icall, loc, target, 0, 0, seq_});
                int fi = prog_.function_at_address(target);
                if (fi < 0 ||
                    prog_.functions[fi].params.size() != in.args.size()) {
                    ImpactKind k = target < kNullPageEnd ? ImpactKind::NullDeref : ImpactKind::Gpf;
                    record_impact(k, AccessKind::Read, 8, loc, -1, 0, target);
                    return;
                }
                if (static_cast<int>(machine_.stack.size()) >= kCallDepthCap) {
                    record_impact(ImpactKind::Bug, AccessKind::None, 0, loc, -1, 0, 0);
                    if (stop_) return;
                    abort_syscall();
                    return;
                }
                std::vector<std::uint64_t> args;
                for (const auto& a : in.args) args.push_back(operand(a));
                frame().instr++;
                push_frame(fi, args, loc, in.dst);
                return;
            }
            case Opcode::Br:
                take_edge(in.target1);
                return;
            case Opcode::Condbr:
                take_edge(operand(in.a) != 0 ? in.target1 : in.target2);
                return;
            case Opcode::Ret:
                do_return(operand(in.a));
                return;
            case Opcode::AssertFail:
                record_impact(in.assert_kind == AssertKind::Warn ? ImpactKind::Warn
                                                                 : ImpactKind::Bug,
                              AccessKind::None, 0, loc, -1, 0, 0);
                if (stop_) return;
                break;
            case Opcode::Nop:
                break;
        }
        frame().instr++;
    }
};

// ---------------------------------------------------------------------------
// Public operations

inline ExecResult execute(const Program& p, const TestCase& tc, ExecConfig cfg = {}) {
    Executor ex(p, cfg);
    return ex.run(tc);
}

struct SnapshotSelector {
    // Freeze at the first UAF/OOB read, optionally restricted to a given
    // allocation site.
    std::optional<Loc> alloc_site;
};

inline Snapshot snapshot_at_first_vuln_read(const Program& p, const TestCase& tc,
                                            SnapshotSelector sel = {},
                                            ExecConfig cfg = {}) {
    Executor ex(p, cfg);
    ex.set_freeze_hook(
        [](void*, const Impact& probe) {
            return probe.kind == ImpactKind::UafRead || probe.kind == ImpactKind::OobRead;
        },
        nullptr);
    Machine m;
    m.init(p, tc);
    ex.resume(std::move(m));
    auto snap = ex.taken_snapshot();
    if (!snap) throw Error("NoVulnRead: no matching UAF/OOB read occurred");
    if (sel.alloc_site) {
        const Allocation& a = snap->machine.heap.allocs[snap->vuln_alloc];
        if (!(a.alloc_site == *sel.alloc_site))
            throw Error("NoVulnRead: first flagged read is from a different allocation site");
    }
    return std::move(*snap);
}

// Resume a snapshot unmodified.
inline ExecResult resume_snapshot(const Program& p, const Snapshot& snap, ExecConfig cfg = {}) {
    Executor ex(p, cfg);
    return ex.resume(snap.machine);
}

// Overwrite the vulnerable allocation's bytes (optionally including both
// redzone side-buffers: size+2*kRedzone bytes, left redzone first) and resume.
inline ExecResult replay_with_bytes(const Program& p, const Snapshot& snap,
                                    const std::vector<std::uint8_t>& object_bytes,
                                    ExecConfig cfg = {},
                                    const std::map<std::uint64_t, std::uint8_t>& spray = {}) {
    Machine m = snap.machine;
    Allocation& a = m.heap.allocs[snap.vuln_alloc];
    if (object_bytes.size() == a.size) {
        std::copy(object_bytes.begin(), object_bytes.end(), a.bytes.begin());
    } else if (object_bytes.size() == a.size + 2 * kRedzone) {
        for (int i = 0; i < kRedzone; ++i) {
            a.lred[i] = object_bytes[i];
            a.lred_set[i] = true;
        }
        std::copy(object_bytes.begin() + kRedzone,
                  object_bytes.begin() + kRedzone + static_cast<std::int64_t>(a.size),
                  a.bytes.begin());
        for (int i = 0; i < kRedzone; ++i) {
            a.rred[i] = object_bytes[kRedzone + a.size + i];
            a.rred_set[i] = true;
        }
    } else {
        throw Error("replay_with_bytes: byte count does not match the vulnerable allocation");
    }
    for (const auto& [addr, b] : spray) {
        // Sprayed bytes that land inside an allocation are written directly.
        auto r = m.heap.resolve(addr);
        if (r) {
            Allocation& t = m.heap.allocs[r->first];
            std::int64_t off = r->second;
            if (off >= 0 && off < static_cast<std::int64_t>(t.size))
                t.bytes[off] = b;
            else if (off < 0) {
                t.lred[off + kRedzone] = b;
                t.lred_set[off + kRedzone] = true;
            } else {
                t.rred[off - t.size] = b;
                t.rred_set[off - t.size] = true;
            }
        } else {
            m.spray[addr] = b;
        }
    }
    Executor ex(p, cfg);
    return ex.resume(std::move(m));
}

}  // namespace miniscope
