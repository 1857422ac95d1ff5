// MiniKernel intermediate representation: program/testcase/diff types,
// the line-oriented text format, and structural validation.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace miniscope {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Core IR types

enum class Opcode {
    Const, Add, Sub, Mul, And, Or, Xor, Shl, Shr, Cmp,
    Load, Store, Alloc, Free, Gload, Gstore,
    Call, Icall, Br, Condbr, Ret, AssertFail, Nop,
};

enum class CmpKind { Eq, Ne, Lt, Le };
enum class AssertKind { Warn, Bug };

constexpr std::uint32_t kNoReg = 0xffffffffu;

struct Operand {
    bool is_reg = false;
    std::uint32_t reg = kNoReg;
    std::uint64_t imm = 0;

    static Operand make_reg(std::uint32_t r) { return Operand{true, r, 0}; }
    static Operand make_imm(std::uint64_t v) { return Operand{false, kNoReg, v}; }
};

struct Loc {
    std::string function;
    int block = -1;
    int instr = -1;

    friend bool operator==(const Loc& a, const Loc& b) {
        return a.function == b.function && a.block == b.block && a.instr == b.instr;
    }
    friend bool operator!=(const Loc& a, const Loc& b) { return !(a == b); }
    friend bool operator<(const Loc& a, const Loc& b) {
        if (a.function != b.function) return a.function < b.function;
        if (a.block != b.block) return a.block < b.block;
        return a.instr < b.instr;
    }
    std::string str() const {
        return function + ":" + std::to_string(block) + ":" + std::to_string(instr);
    }
};

struct Instr {
    Opcode op = Opcode::Nop;
    CmpKind cmp = CmpKind::Eq;
    AssertKind assert_kind = AssertKind::Warn;

    std::uint32_t dst = kNoReg;        // result register, kNoReg if none
    Operand a, b;                      // generic operands
    std::uint32_t addr_reg = kNoReg;   // load/store/free/icall base
    std::int64_t addr_off = 0;         // load/store constant byte offset
    int width = 8;                     // load/store access width
    std::string name;                  // callee or global name
    std::vector<Operand> args;         // call/icall arguments
    int target1 = -1, target2 = -1;    // resolved branch targets
    std::string label1, label2;        // branch labels as written

    bool is_terminator() const {
        return op == Opcode::Br || op == Opcode::Condbr || op == Opcode::Ret;
    }
};

struct Block {
    std::string label;
    std::vector<Instr> instrs;
};

struct Function {
    std::string name;
    std::vector<std::uint32_t> params;
    std::vector<Block> blocks;
    std::map<std::string, int> block_index;
};

struct Program {
    std::string name;
    std::vector<std::string> globals;
    std::vector<Function> functions;                       // declaration order
    std::map<std::string, int> function_index;
    std::vector<std::string> entries;                      // syscall entry points
    std::map<std::string, std::vector<std::string>> templates;  // template -> syscalls
    std::map<std::string, std::vector<std::string>> modules;    // module -> templates

    bool is_entry(const std::string& fn) const {
        for (const auto& e : entries)
            if (e == fn) return true;
        return false;
    }
    const Function* find_function(const std::string& fn) const {
        auto it = function_index.find(fn);
        return it == function_index.end() ? nullptr : &functions[it->second];
    }
    int global_index(const std::string& g) const {
        for (size_t i = 0; i < globals.size(); ++i)
            if (globals[i] == g) return static_cast<int>(i);
        return -1;
    }
    // Deterministic guest address table for icall targets.
    static constexpr std::uint64_t kFuncBase = 0x400000;
    static constexpr std::uint64_t kFuncStride = 0x100;
    std::uint64_t function_address(int index) const {
        return kFuncBase + kFuncStride * static_cast<std::uint64_t>(index);
    }
    int function_at_address(std::uint64_t addr) const {
        if (addr < kFuncBase) return -1;
        std::uint64_t off = addr - kFuncBase;
        if (off % kFuncStride != 0) return -1;
        std::uint64_t idx = off / kFuncStride;
        if (idx >= functions.size()) return -1;
        return static_cast<int>(idx);
    }
};

struct TestCase {
    struct Call {
        std::string syscall;
        std::vector<std::uint64_t> args;
    };
    std::vector<Call> calls;
};

struct Diagnostic {
    int line = 0;
    int column = 0;
    std::string message;
    std::string str() const {
        return std::to_string(line) + ":" + std::to_string(column) + ": " + message;
    }
};

template <typename T>
struct ParseResult {
    std::optional<T> value;
    std::vector<Diagnostic> diagnostics;
    bool ok() const { return value.has_value(); }
    std::string error_text() const {
        std::string s;
        for (const auto& d : diagnostics) s += d.str() + "\n";
        return s;
    }
};

// ---------------------------------------------------------------------------
// Parsing helpers

namespace detail {

inline bool is_ident_start(char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_';
}
inline bool is_ident_char(char c) {
    return is_ident_start(c) || (c >= '0' && c <= '9');
}

struct LineLexer {
    std::string text;
    int line_no;
    size_t pos = 0;

    void skip_ws() {
        while (pos < text.size() && (text[pos] == ' ' || text[pos] == '\t')) ++pos;
    }
    bool at_end() {
        skip_ws();
        return pos >= text.size();
    }
    int col() const { return static_cast<int>(pos) + 1; }

    bool peek_char(char c) {
        skip_ws();
        return pos < text.size() && text[pos] == c;
    }
    bool eat_char(char c) {
        skip_ws();
        if (pos < text.size() && text[pos] == c) { ++pos; return true; }
        return false;
    }
    std::optional<std::string> eat_ident() {
        skip_ws();
        if (pos >= text.size() || !is_ident_start(text[pos])) return std::nullopt;
        size_t start = pos;
        while (pos < text.size() && is_ident_char(text[pos])) ++pos;
        return text.substr(start, pos - start);
    }
    std::optional<std::uint64_t> eat_int(bool* negative = nullptr) {
        skip_ws();
        size_t p = pos;
        bool neg = false;
        if (p < text.size() && (text[p] == '-' || text[p] == '+')) {
            neg = text[p] == '-';
            ++p;
        }
        if (p >= text.size() || !(text[p] >= '0' && text[p] <= '9')) return std::nullopt;
        std::uint64_t v = 0;
        if (p + 1 < text.size() && text[p] == '0' && (text[p + 1] == 'x' || text[p + 1] == 'X')) {
            p += 2;
            if (p >= text.size()) return std::nullopt;
            while (p < text.size()) {
                char c = text[p];
                int d;
                if (c >= '0' && c <= '9') d = c - '0';
                else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
                else if (c >= 'A' && c <= 'F') d = c - 'A' + 10;
                else break;
                v = v * 16 + static_cast<std::uint64_t>(d);
                ++p;
            }
        } else {
            while (p < text.size() && text[p] >= '0' && text[p] <= '9') {
                v = v * 10 + static_cast<std::uint64_t>(text[p] - '0');
                ++p;
            }
        }
        pos = p;
        if (negative) *negative = neg;
        if (neg && !negative) v = ~v + 1;
        if (negative && neg) v = ~v + 1;
        return v;
    }
    std::optional<std::uint32_t> eat_reg() {
        skip_ws();
        size_t save = pos;
        if (pos >= text.size() || text[pos] != 'r') return std::nullopt;
        ++pos;
        if (pos >= text.size() || !(text[pos] >= '0' && text[pos] <= '9')) {
            pos = save;
            return std::nullopt;
        }
        std::uint32_t v = 0;
        while (pos < text.size() && text[pos] >= '0' && text[pos] <= '9') {
            v = v * 10 + static_cast<std::uint32_t>(text[pos] - '0');
            ++pos;
        }
        if (pos < text.size() && is_ident_char(text[pos])) {
            pos = save;
            return std::nullopt;
        }
        return v;
    }
    std::optional<Operand> eat_operand() {
        if (auto r = eat_reg()) return Operand::make_reg(*r);
        if (auto v = eat_int()) return Operand::make_imm(*v);
        return std::nullopt;
    }
};

inline std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::string cur;
    for (char c : text) {
        if (c == '\n') {
            lines.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    if (!cur.empty()) lines.push_back(cur);
    return lines;
}

inline std::string strip_comment(const std::string& line) {
    auto p = line.find(';');
    return p == std::string::npos ? line : line.substr(0, p);
}

inline bool blank(const std::string& line) {
    for (char c : line)
        if (c != ' ' && c != '\t') return false;
    return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Program parser

class ProgramParser {
public:
    ParseResult<Program> parse(const std::string& text) {
        lines_ = detail::split_lines(text);
        ParseResult<Program> out;
        Program p;
        idx_ = 0;
        diags_.clear();

        {
            auto lx = next_line();
            if (!lx) {
                fail(1, 1, "expected 'program <name>'");
                out.diagnostics = diags_;
                return out;
            }
            auto kw = lx->eat_ident();
            if (!kw || *kw != "program") {
                fail(lx->line_no, lx->col(), "expected keyword 'program'");
                out.diagnostics = diags_;
                return out;
            }
            auto name = lx->eat_ident();
            if (!name) {
                fail(lx->line_no, lx->col(), "expected program name");
                out.diagnostics = diags_;
                return out;
            }
            p.name = *name;
        }

        while (auto lx = next_line()) {
            auto save = *lx;
            auto kw = lx->eat_ident();
            if (!kw) {
                fail(lx->line_no, lx->col(), "expected declaration keyword");
                break;
            }
            if (*kw == "global") {
                auto g = lx->eat_ident();
                if (!g) { fail(lx->line_no, lx->col(), "expected global name"); break; }
                p.globals.push_back(*g);
            } else if (*kw == "fn") {
                if (!parse_function(p, *lx)) break;
            } else if (*kw == "entry") {
                auto e = lx->eat_ident();
                if (!e) { fail(lx->line_no, lx->col(), "expected entry function name"); break; }
                p.entries.push_back(*e);
            } else if (*kw == "template") {
                auto t = parse_name_set(*lx);
                if (!t) break;
                p.templates[t->first] = t->second;
            } else if (*kw == "module") {
                auto m = parse_name_set(*lx);
                if (!m) break;
                p.modules[m->first] = m->second;
            } else {
                fail(save.line_no, 1, "unknown declaration '" + *kw + "'");
                break;
            }
        }

        if (!diags_.empty()) {
            out.diagnostics = diags_;
            return out;
        }
        for (size_t i = 0; i < p.functions.size(); ++i)
            p.function_index[p.functions[i].name] = static_cast<int>(i);
        validate(p);
        out.diagnostics = diags_;
        if (diags_.empty()) out.value = std::move(p);
        return out;
    }

private:
    std::vector<std::string> lines_;
    size_t idx_ = 0;
    std::vector<Diagnostic> diags_;

    void fail(int line, int col, const std::string& msg) {
        diags_.push_back({line, col, msg});
    }

    std::optional<detail::LineLexer> next_line() {
        while (idx_ < lines_.size()) {
            std::string body = detail::strip_comment(lines_[idx_]);
            int ln = static_cast<int>(idx_) + 1;
            ++idx_;
            if (detail::blank(body)) continue;
            return detail::LineLexer{body, ln};
        }
        return std::nullopt;
    }

    std::optional<std::pair<std::string, std::vector<std::string>>> parse_name_set(
        detail::LineLexer& lx) {
        auto name = lx.eat_ident();
        if (!name) { fail(lx.line_no, lx.col(), "expected group name"); return std::nullopt; }
        if (!lx.eat_char('{')) { fail(lx.line_no, lx.col(), "expected '{'"); return std::nullopt; }
        std::vector<std::string> members;
        if (!lx.peek_char('}')) {
            while (true) {
                auto m = lx.eat_ident();
                if (!m) { fail(lx.line_no, lx.col(), "expected member name"); return std::nullopt; }
                members.push_back(*m);
                if (lx.eat_char(',')) continue;
                break;
            }
        }
        if (!lx.eat_char('}')) { fail(lx.line_no, lx.col(), "expected '}'"); return std::nullopt; }
        return std::make_pair(*name, members);
    }

    bool parse_function(Program& p, detail::LineLexer& lx) {
        Function fn;
        auto name = lx.eat_ident();
        if (!name) { fail(lx.line_no, lx.col(), "expected function name"); return false; }
        fn.name = *name;
        if (!lx.eat_char('(')) { fail(lx.line_no, lx.col(), "expected '('"); return false; }
        if (!lx.peek_char(')')) {
            while (true) {
                auto r = lx.eat_reg();
                if (!r) { fail(lx.line_no, lx.col(), "expected parameter register"); return false; }
                fn.params.push_back(*r);
                if (lx.eat_char(',')) continue;
                break;
            }
        }
        if (!lx.eat_char(')')) { fail(lx.line_no, lx.col(), "expected ')'"); return false; }
        if (!lx.eat_char('{')) { fail(lx.line_no, lx.col(), "expected '{'"); return false; }

        // Blocks until a lone '}' line.
        Block* cur = nullptr;
        while (true) {
            auto ln = next_line();
            if (!ln) {
                fail(static_cast<int>(lines_.size()), 1, "unexpected end of file in function '" + fn.name + "'");
                return false;
            }
            if (ln->eat_char('}')) {
                if (!ln->at_end()) {
                    fail(ln->line_no, ln->col(), "unexpected text after '}'");
                    return false;
                }
                break;
            }
            // Label?
            auto save = *ln;
            auto id = ln->eat_ident();
            if (id && ln->eat_char(':') && ln->at_end()) {
                if (fn.block_index.count(*id)) {
                    fail(save.line_no, 1, "duplicate block label '" + *id + "'");
                    return false;
                }
                fn.block_index[*id] = static_cast<int>(fn.blocks.size());
                fn.blocks.push_back(Block{*id, {}});
                cur = &fn.blocks.back();
                continue;
            }
            *ln = save;
            if (!cur) {
                fail(ln->line_no, 1, "instruction before first block label");
                return false;
            }
            auto instr = parse_instr(*ln);
            if (!instr) return false;
            cur->instrs.push_back(*instr);
        }
        p.functions.push_back(std::move(fn));
        return true;
    }

    std::optional<Instr> parse_instr(detail::LineLexer& lx) {
        Instr in;
        auto save = lx;
        // Forms starting with a register: "rX = ..."
        if (auto dst = lx.eat_reg()) {
            if (!lx.eat_char('=')) {
                fail(lx.line_no, lx.col(), "expected '='");
                return std::nullopt;
            }
            in.dst = *dst;
            auto op = lx.eat_ident();
            if (!op) { fail(lx.line_no, lx.col(), "expected opcode"); return std::nullopt; }
            return parse_value_op(lx, in, *op);
        }
        lx = save;
        auto kw = lx.eat_ident();
        if (!kw) { fail(lx.line_no, lx.col(), "expected instruction"); return std::nullopt; }

        if (*kw == "store") {
            in.op = Opcode::Store;
            auto base = lx.eat_reg();
            if (!base) { fail(lx.line_no, lx.col(), "expected address register"); return std::nullopt; }
            in.addr_reg = *base;
            if (lx.eat_char('+')) {
                bool neg = false;
                auto off = lx.eat_int(&neg);
                if (!off) { fail(lx.line_no, lx.col(), "expected address offset"); return std::nullopt; }
                in.addr_off = static_cast<std::int64_t>(*off);
            }
            if (!lx.eat_char(',')) { fail(lx.line_no, lx.col(), "expected ','"); return std::nullopt; }
            auto val = lx.eat_reg();
            if (!val) { fail(lx.line_no, lx.col(), "expected value register"); return std::nullopt; }
            in.a = Operand::make_reg(*val);
            if (!lx.eat_char(',')) { fail(lx.line_no, lx.col(), "expected ','"); return std::nullopt; }
            auto w = lx.eat_int();
            if (!w || !valid_width(*w)) {
                fail(lx.line_no, lx.col(), "expected width 1, 2, 4 or 8");
                return std::nullopt;
            }
            in.width = static_cast<int>(*w);
            return finish(lx, in);
        }
        if (*kw == "free") {
            in.op = Opcode::Free;
            auto r = lx.eat_reg();
            if (!r) { fail(lx.line_no, lx.col(), "expected register"); return std::nullopt; }
            in.addr_reg = *r;
            return finish(lx, in);
        }
        if (*kw == "gstore") {
            in.op = Opcode::Gstore;
            auto g = lx.eat_ident();
            if (!g) { fail(lx.line_no, lx.col(), "expected global name"); return std::nullopt; }
            in.name = *g;
            if (!lx.eat_char(',')) { fail(lx.line_no, lx.col(), "expected ','"); return std::nullopt; }
            auto r = lx.eat_reg();
            if (!r) { fail(lx.line_no, lx.col(), "expected register"); return std::nullopt; }
            in.a = Operand::make_reg(*r);
            return finish(lx, in);
        }
        if (*kw == "br") {
            in.op = Opcode::Br;
            auto l = lx.eat_ident();
            if (!l) { fail(lx.line_no, lx.col(), "expected block label"); return std::nullopt; }
            in.label1 = *l;
            return finish(lx, in);
        }
        if (*kw == "condbr") {
            in.op = Opcode::Condbr;
            auto r = lx.eat_reg();
            if (!r) { fail(lx.line_no, lx.col(), "expected condition register"); return std::nullopt; }
            in.a = Operand::make_reg(*r);
            if (!lx.eat_char(',')) { fail(lx.line_no, lx.col(), "expected ','"); return std::nullopt; }
            auto l1 = lx.eat_ident();
            if (!l1) { fail(lx.line_no, lx.col(), "expected true label"); return std::nullopt; }
            in.label1 = *l1;
            if (!lx.eat_char(',')) { fail(lx.line_no, lx.col(), "expected ','"); return std::nullopt; }
            auto l2 = lx.eat_ident();
            if (!l2) { fail(lx.line_no, lx.col(), "expected false label"); return std::nullopt; }
            in.label2 = *l2;
            return finish(lx, in);
        }
        if (*kw == "ret") {
            in.op = Opcode::Ret;
            auto v = lx.eat_operand();
            if (!v) { fail(lx.line_no, lx.col(), "expected return operand"); return std::nullopt; }
            in.a = *v;
            return finish(lx, in);
        }
        if (*kw == "call") {
            in.op = Opcode::Call;
            auto callee = lx.eat_ident();
            if (!callee) { fail(lx.line_no, lx.col(), "expected callee name"); return std::nullopt; }
            in.name = *callee;
            if (!parse_args(lx, in)) return std::nullopt;
            return parse_ret_binding(lx, in);
        }
        if (*kw == "icall") {
            in.op = Opcode::Icall;
            auto r = lx.eat_reg();
            if (!r) { fail(lx.line_no, lx.col(), "expected target register"); return std::nullopt; }
            in.addr_reg = *r;
            if (!parse_args(lx, in)) return std::nullopt;
            return parse_ret_binding(lx, in);
        }
        if (*kw == "assertfail") {
            in.op = Opcode::AssertFail;
            auto k = lx.eat_ident();
            if (!k || (*k != "WARN" && *k != "BUG")) {
                fail(lx.line_no, lx.col(), "expected WARN or BUG");
                return std::nullopt;
            }
            in.assert_kind = *k == "WARN" ? AssertKind::Warn : AssertKind::Bug;
            return finish(lx, in);
        }
        if (*kw == "nop") {
            in.op = Opcode::Nop;
            return finish(lx, in);
        }
        fail(lx.line_no, 1, "unknown instruction '" + *kw + "'");
        return std::nullopt;
    }

    std::optional<Instr> parse_value_op(detail::LineLexer& lx, Instr in, const std::string& op) {
        static const std::map<std::string, Opcode> binops = {
            {"add", Opcode::Add}, {"sub", Opcode::Sub}, {"mul", Opcode::Mul},
            {"and", Opcode::And}, {"or", Opcode::Or},   {"xor", Opcode::Xor},
            {"shl", Opcode::Shl}, {"shr", Opcode::Shr},
        };
        if (op == "const") {
            in.op = Opcode::Const;
            auto v = lx.eat_int();
            if (!v) { fail(lx.line_no, lx.col(), "expected constant"); return std::nullopt; }
            in.a = Operand::make_imm(*v);
            return finish(lx, in);
        }
        if (auto it = binops.find(op); it != binops.end()) {
            in.op = it->second;
            auto a = lx.eat_operand();
            if (!a) { fail(lx.line_no, lx.col(), "expected operand"); return std::nullopt; }
            if (!lx.eat_char(',')) { fail(lx.line_no, lx.col(), "expected ','"); return std::nullopt; }
            auto b = lx.eat_operand();
            if (!b) { fail(lx.line_no, lx.col(), "expected operand"); return std::nullopt; }
            in.a = *a;
            in.b = *b;
            return finish(lx, in);
        }
        if (op == "cmp") {
            in.op = Opcode::Cmp;
            auto k = lx.eat_ident();
            if (!k) { fail(lx.line_no, lx.col(), "expected cmp kind"); return std::nullopt; }
            if (*k == "eq") in.cmp = CmpKind::Eq;
            else if (*k == "ne") in.cmp = CmpKind::Ne;
            else if (*k == "lt") in.cmp = CmpKind::Lt;
            else if (*k == "le") in.cmp = CmpKind::Le;
            else { fail(lx.line_no, lx.col(), "expected eq, ne, lt or le"); return std::nullopt; }
            auto a = lx.eat_operand();
            if (!a) { fail(lx.line_no, lx.col(), "expected operand"); return std::nullopt; }
            if (!lx.eat_char(',')) { fail(lx.line_no, lx.col(), "expected ','"); return std::nullopt; }
            auto b = lx.eat_operand();
            if (!b) { fail(lx.line_no, lx.col(), "expected operand"); return std::nullopt; }
            in.a = *a;
            in.b = *b;
            return finish(lx, in);
        }
        if (op == "load") {
            in.op = Opcode::Load;
            auto base = lx.eat_reg();
            if (!base) { fail(lx.line_no, lx.col(), "expected address register"); return std::nullopt; }
            in.addr_reg = *base;
            if (lx.eat_char('+')) {
                bool neg = false;
                auto off = lx.eat_int(&neg);
                if (!off) { fail(lx.line_no, lx.col(), "expected address offset"); return std::nullopt; }
                in.addr_off = static_cast<std::int64_t>(*off);
            }
            if (!lx.eat_char(',')) { fail(lx.line_no, lx.col(), "expected ','"); return std::nullopt; }
            auto w = lx.eat_int();
            if (!w || !valid_width(*w)) {
                fail(lx.line_no, lx.col(), "expected width 1, 2, 4 or 8");
                return std::nullopt;
            }
            in.width = static_cast<int>(*w);
            return finish(lx, in);
        }
        if (op == "alloc") {
            in.op = Opcode::Alloc;
            auto v = lx.eat_operand();
            if (!v) { fail(lx.line_no, lx.col(), "expected size operand"); return std::nullopt; }
            in.a = *v;
            return finish(lx, in);
        }
        if (op == "gload") {
            in.op = Opcode::Gload;
            auto g = lx.eat_ident();
            if (!g) { fail(lx.line_no, lx.col(), "expected global name"); return std::nullopt; }
            in.name = *g;
            return finish(lx, in);
        }
        if (op == "call") {
            in.op = Opcode::Call;
            auto callee = lx.eat_ident();
            if (!callee) { fail(lx.line_no, lx.col(), "expected callee name"); return std::nullopt; }
            in.name = *callee;
            if (!parse_args(lx, in)) return std::nullopt;
            return finish(lx, in);
        }
        if (op == "icall") {
            in.op = Opcode::Icall;
            auto r = lx.eat_reg();
            if (!r) { fail(lx.line_no, lx.col(), "expected target register"); return std::nullopt; }
            in.addr_reg = *r;
            if (!parse_args(lx, in)) return std::nullopt;
            return finish(lx, in);
        }
        fail(lx.line_no, 1, "unknown opcode '" + op + "'");
        return std::nullopt;
    }

    bool parse_args(detail::LineLexer& lx, Instr& in) {
        if (!lx.eat_char('(')) { fail(lx.line_no, lx.col(), "expected '('"); return false; }
        if (!lx.peek_char(')')) {
            while (true) {
                auto a = lx.eat_operand();
                if (!a) { fail(lx.line_no, lx.col(), "expected argument"); return false; }
                in.args.push_back(*a);
                if (lx.eat_char(',')) continue;
                break;
            }
        }
        if (!lx.eat_char(')')) { fail(lx.line_no, lx.col(), "expected ')'"); return false; }
        return true;
    }

    std::optional<Instr> parse_ret_binding(detail::LineLexer& lx, Instr in) {
        lx.skip_ws();
        if (lx.pos + 1 < lx.text.size() && lx.text[lx.pos] == '-' && lx.text[lx.pos + 1] == '>') {
            lx.pos += 2;
            auto r = lx.eat_reg();
            if (!r) { fail(lx.line_no, lx.col(), "expected result register"); return std::nullopt; }
            in.dst = *r;
        }
        return finish(lx, in);
    }

    std::optional<Instr> finish(detail::LineLexer& lx, Instr in) {
        if (!lx.at_end()) {
            fail(lx.line_no, lx.col(), "unexpected trailing text");
            return std::nullopt;
        }
        return in;
    }

    static bool valid_width(std::uint64_t w) {
        return w == 1 || w == 2 || w == 4 || w == 8;
    }

    // -----------------------------------------------------------------------
    // Structural validation

    void validate(Program& p) {
        for (auto& fn : p.functions) validate_function(p, fn);

        for (const auto& e : p.entries) {
            auto it = p.function_index.find(e);
            if (it == p.function_index.end()) {
                fail(0, 0, "entry '" + e + "' has no function definition");
            } else if (p.functions[it->second].params.size() > 6) {
                fail(0, 0, "entry '" + e + "' has arity > 6");
            }
        }
        for (const auto& [tname, syscalls] : p.templates)
            for (const auto& s : syscalls)
                if (!p.is_entry(s))
                    fail(0, 0, "template '" + tname + "' names unknown syscall '" + s + "'");
        for (const auto& [mname, tpls] : p.modules)
            for (const auto& t : tpls)
                if (!p.templates.count(t))
                    fail(0, 0, "module '" + mname + "' names unknown template '" + t + "'");
    }

    void validate_function(Program& p, Function& fn) {
        if (fn.blocks.empty()) {
            fail(0, 0, "function '" + fn.name + "' has no blocks");
            return;
        }
        for (auto& bb : fn.blocks) {
            if (bb.instrs.empty()) {
                fail(0, 0, "block '" + bb.label + "' in '" + fn.name + "' is empty");
                continue;
            }
            for (size_t i = 0; i < bb.instrs.size(); ++i) {
                auto& in = bb.instrs[i];
                bool last = i + 1 == bb.instrs.size();
                if (in.is_terminator() != last) {
                    fail(0, 0, "block '" + bb.label + "' in '" + fn.name +
                                   "' must end in exactly one terminator");
                }
                // Resolve branch labels.
                if (in.op == Opcode::Br || in.op == Opcode::Condbr) {
                    auto it = fn.block_index.find(in.label1);
                    if (it == fn.block_index.end())
                        fail(0, 0, "unresolved label '" + in.label1 + "' in '" + fn.name + "'");
                    else
                        in.target1 = it->second;
                }
                if (in.op == Opcode::Condbr) {
                    auto it = fn.block_index.find(in.label2);
                    if (it == fn.block_index.end())
                        fail(0, 0, "unresolved label '" + in.label2 + "' in '" + fn.name + "'");
                    else
                        in.target2 = it->second;
                }
                if (in.op == Opcode::Call) {
                    auto it = p.function_index.find(in.name);
                    if (it == p.function_index.end())
                        fail(0, 0, "unresolved call target '" + in.name + "' in '" + fn.name + "'");
                    else if (p.functions[it->second].params.size() != in.args.size())
                        fail(0, 0, "arity mismatch calling '" + in.name + "' from '" + fn.name + "'");
                }
                if (in.op == Opcode::Gload || in.op == Opcode::Gstore) {
                    if (p.global_index(in.name) < 0)
                        fail(0, 0, "unknown global '" + in.name + "' in '" + fn.name + "'");
                }
            }
        }
        if (!diags_.empty()) return;
        check_use_before_def(fn);
    }

    // Definite-assignment dataflow: at each use, the register must be assigned
    // on every path from entry.
    void check_use_before_def(const Function& fn) {
        size_t n = fn.blocks.size();
        std::vector<std::set<std::uint32_t>> in_defs(n), out_defs(n);
        std::set<std::uint32_t> params(fn.params.begin(), fn.params.end());
        std::set<std::uint32_t> all;
        all.insert(params.begin(), params.end());
        for (const auto& bb : fn.blocks)
            for (const auto& in : bb.instrs)
                if (in.dst != kNoReg) all.insert(in.dst);

        // Initialize to "everything defined" so the intersection converges down.
        for (size_t b = 0; b < n; ++b) out_defs[b] = all;
        bool changed = true;
        while (changed) {
            changed = false;
            for (size_t b = 0; b < n; ++b) {
                std::set<std::uint32_t> cur;
                if (b == 0) {
                    cur = params;
                } else {
                    bool first = true;
                    for (size_t pb = 0; pb < n; ++pb) {
                        const auto& term = fn.blocks[pb].instrs.back();
                        bool edge = (term.op == Opcode::Br && term.target1 == static_cast<int>(b)) ||
                                    (term.op == Opcode::Condbr &&
                                     (term.target1 == static_cast<int>(b) ||
                                      term.target2 == static_cast<int>(b)));
                        if (!edge) continue;
                        if (first) {
                            cur = out_defs[pb];
                            first = false;
                        } else {
                            std::set<std::uint32_t> inter;
                            for (auto r : cur)
                                if (out_defs[pb].count(r)) inter.insert(r);
                            cur = inter;
                        }
                    }
                    if (first) cur = params;  // unreachable block: only params
                }
                in_defs[b] = cur;
                for (const auto& in : fn.blocks[b].instrs)
                    if (in.dst != kNoReg) cur.insert(in.dst);
                if (cur != out_defs[b]) {
                    out_defs[b] = cur;
                    changed = true;
                }
            }
        }

        for (size_t b = 0; b < n; ++b) {
            auto defs = in_defs[b];
            for (const auto& in : fn.blocks[b].instrs) {
                auto use = [&](const Operand& o) {
                    if (o.is_reg && !defs.count(o.reg))
                        fail(0, 0, "register r" + std::to_string(o.reg) +
                                       " used before definition in '" + fn.name + "'");
                };
                auto use_reg = [&](std::uint32_t r) {
                    if (r != kNoReg && !defs.count(r))
                        fail(0, 0, "register r" + std::to_string(r) +
                                       " used before definition in '" + fn.name + "'");
                };
                switch (in.op) {
                    case Opcode::Const: break;
                    case Opcode::Add: case Opcode::Sub: case Opcode::Mul:
                    case Opcode::And: case Opcode::Or: case Opcode::Xor:
                    case Opcode::Shl: case Opcode::Shr: case Opcode::Cmp:
                        use(in.a); use(in.b); break;
                    case Opcode::Load: use_reg(in.addr_reg); break;
                    case Opcode::Store: use_reg(in.addr_reg); use(in.a); break;
                    case Opcode::Alloc: use(in.a); break;
                    case Opcode::Free: use_reg(in.addr_reg); break;
                    case Opcode::Gstore: use(in.a); break;
                    case Opcode::Condbr: use(in.a); break;
                    case Opcode::Ret: use(in.a); break;
                    case Opcode::Call:
                        for (const auto& a : in.args) use(a);
                        break;
                    case Opcode::Icall:
                        use_reg(in.addr_reg);
                        for (const auto& a : in.args) use(a);
                        break;
                    default: break;
                }
                if (in.dst != kNoReg) defs.insert(in.dst);
            }
        }
    }
};

inline ParseResult<Program> parse_program(const std::string& text) {
    ProgramParser parser;
    return parser.parse(text);
}

// ---------------------------------------------------------------------------
// Canonical printer

namespace detail {

inline std::string operand_str(const Operand& o) {
    if (o.is_reg) return "r" + std::to_string(o.reg);
    return std::to_string(o.imm);
}

inline std::string addr_str(const Instr& in) {
    std::string s = "r" + std::to_string(in.addr_reg);
    if (in.addr_off != 0) s += " + " + std::to_string(in.addr_off);
    return s;
}

inline std::string instr_str(const Instr& in) {
    auto args = [&]() {
        std::string s = "(";
        for (size_t i = 0; i < in.args.size(); ++i) {
            if (i) s += ", ";
            s += operand_str(in.args[i]);
        }
        return s + ")";
    };
    auto binop = [&](const char* name) {
        return "r" + std::to_string(in.dst) + " = " + name + " " + operand_str(in.a) + ", " +
               operand_str(in.b);
    };
    switch (in.op) {
        case Opcode::Const:
            return "r" + std::to_string(in.dst) + " = const " + std::to_string(in.a.imm);
        case Opcode::Add: return binop("add");
        case Opcode::Sub: return binop("sub");
        case Opcode::Mul: return binop("mul");
        case Opcode::And: return binop("and");
        case Opcode::Or: return binop("or");
        case Opcode::Xor: return binop("xor");
        case Opcode::Shl: return binop("shl");
        case Opcode::Shr: return binop("shr");
        case Opcode::Cmp: {
            const char* k = in.cmp == CmpKind::Eq   ? "eq"
                            : in.cmp == CmpKind::Ne ? "ne"
                            : in.cmp == CmpKind::Lt ? "lt"
                                                    : "le";
            return "r" + std::to_string(in.dst) + " = cmp " + std::string(k) + " " +
                   operand_str(in.a) + ", " + operand_str(in.b);
        }
        case Opcode::Load:
            return "r" + std::to_string(in.dst) + " = load " + addr_str(in) + ", " +
                   std::to_string(in.width);
        case Opcode::Store:
            return "store " + addr_str(in) + ", " + operand_str(in.a) + ", " +
                   std::to_string(in.width);
        case Opcode::Alloc:
            return "r" + std::to_string(in.dst) + " = alloc " + operand_str(in.a);
        case Opcode::Free:
            return "free r" + std::to_string(in.addr_reg);
        case Opcode::Gload:
            return "r" + std::to_string(in.dst) + " = gload " + in.name;
        case Opcode::Gstore:
            return "gstore " + in.name + ", " + operand_str(in.a);
        case Opcode::Call: {
            std::string s = "call " + in.name + args();
            if (in.dst != kNoReg) s += " -> r" + std::to_string(in.dst);
            return s;
        }
        case Opcode::Icall: {
            std::string s = "icall r" + std::to_string(in.addr_reg) + args();
            if (in.dst != kNoReg) s += " -> r" + std::to_string(in.dst);
            return s;
        }
        case Opcode::Br: return "br " + in.label1;
        case Opcode::Condbr:
            return "condbr " + operand_str(in.a) + ", " + in.label1 + ", " + in.label2;
        case Opcode::Ret: return "ret " + operand_str(in.a);
        case Opcode::AssertFail:
            return std::string("assertfail ") + (in.assert_kind == AssertKind::Warn ? "WARN" : "BUG");
        case Opcode::Nop: return "nop";
    }
    return "nop";
}

}  // namespace detail

inline std::string print_program(const Program& p) {
    std::ostringstream os;
    os << "program " << p.name << "\n";
    for (const auto& g : p.globals) os << "global " << g << "\n";
    for (const auto& fn : p.functions) {
        os << "fn " << fn.name << "(";
        for (size_t i = 0; i < fn.params.size(); ++i) {
            if (i) os << ", ";
            os << "r" << fn.params[i];
        }
        os << ") {\n";
        for (const auto& bb : fn.blocks) {
            os << bb.label << ":\n";
            for (const auto& in : bb.instrs) os << "  " << detail::instr_str(in) << "\n";
        }
        os << "}\n";
    }
    for (const auto& e : p.entries) os << "entry " << e << "\n";
    for (const auto& [name, members] : p.templates) {
        os << "template " << name << " { ";
        for (size_t i = 0; i < members.size(); ++i) {
            if (i) os << ", ";
            os << members[i];
        }
        os << " }\n";
    }
    for (const auto& [name, members] : p.modules) {
        os << "module " << name << " { ";
        for (size_t i = 0; i < members.size(); ++i) {
            if (i) os << ", ";
            os << members[i];
        }
        os << " }\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Structural equality (used by the round-trip property)

inline bool structurally_equal(const Program& a, const Program& b) {
    return print_program(a) == print_program(b);
}

// ---------------------------------------------------------------------------
// TestCase parsing

inline ParseResult<TestCase> parse_testcase(const std::string& text, const Program& p) {
    ParseResult<TestCase> out;
    TestCase tc;
    auto lines = detail::split_lines(text);

    bool any = false;
    for (const auto& raw : lines) {
        if (!detail::blank(detail::strip_comment(raw))) { any = true; break; }
    }
    if (!any) {
        out.value = tc;  // empty file: run nothing
        return out;
    }

    size_t idx = 0;
    auto next = [&]() -> std::optional<detail::LineLexer> {
        while (idx < lines.size()) {
            std::string body = detail::strip_comment(lines[idx]);
            int ln = static_cast<int>(idx) + 1;
            ++idx;
            if (detail::blank(body)) continue;
            return detail::LineLexer{body, ln};
        }
        return std::nullopt;
    };

    auto first = next();
    if (!first || !first->eat_ident().has_value()) {
        out.diagnostics.push_back({1, 1, "expected 'poc {'"});
        return out;
    }
    // Accept "poc {" on one line.
    if (!first->eat_char('{')) {
        out.diagnostics.push_back({first->line_no, first->col(), "expected '{'"});
        return out;
    }

    while (auto lx = next()) {
        if (lx->eat_char('}')) {
            if (!lx->at_end()) {
                out.diagnostics.push_back({lx->line_no, lx->col(), "unexpected text after '}'"});
                return out;
            }
            out.value = tc;
            return out;
        }
        auto kw = lx->eat_ident();
        if (!kw || *kw != "call") {
            out.diagnostics.push_back({lx->line_no, 1, "expected 'call'"});
            return out;
        }
        auto name = lx->eat_ident();
        if (!name) {
            out.diagnostics.push_back({lx->line_no, lx->col(), "expected syscall name"});
            return out;
        }
        if (!lx->eat_char('(')) {
            out.diagnostics.push_back({lx->line_no, lx->col(), "expected '('"});
            return out;
        }
        TestCase::Call call;
        call.syscall = *name;
        if (!lx->peek_char(')')) {
            while (true) {
                auto v = lx->eat_int();
                if (!v) {
                    out.diagnostics.push_back({lx->line_no, lx->col(), "expected integer argument"});
                    return out;
                }
                call.args.push_back(*v);
                if (lx->eat_char(',')) continue;
                break;
            }
        }
        if (!lx->eat_char(')')) {
            out.diagnostics.push_back({lx->line_no, lx->col(), "expected ')'"});
            return out;
        }
        if (!p.is_entry(call.syscall)) {
            out.diagnostics.push_back(
                {lx->line_no, 1, "unknown syscall '" + call.syscall + "'"});
            return out;
        }
        const Function* fn = p.find_function(call.syscall);
        if (fn && fn->params.size() != call.args.size()) {
            out.diagnostics.push_back(
                {lx->line_no, 1, "arity mismatch for syscall '" + call.syscall + "'"});
            return out;
        }
        tc.calls.push_back(std::move(call));
    }
    out.diagnostics.push_back({static_cast<int>(lines.size()), 1, "missing closing '}'"});
    return out;
}

inline std::string print_testcase(const TestCase& tc) {
    std::ostringstream os;
    os << "poc {\n";
    for (const auto& c : tc.calls) {
        os << "  call " << c.syscall << "(";
        for (size_t i = 0; i < c.args.size(); ++i) {
            if (i) os << ", ";
            os << c.args[i];
        }
        os << ")\n";
    }
    os << "}\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Textual diffs (unified-diff subset over canonical program text)

struct Diff {
    struct Hunk {
        int old_start = 1;  // 1-based line in the old text
        int old_count = 0;
        int new_start = 1;
        int new_count = 0;
        // Lines prefixed ' ', '-', '+' in order.
        std::vector<std::string> lines;
    };
    std::vector<Hunk> hunks;
};

struct Conflict {
    int hunk_index = -1;
    std::string message;
};

inline ParseResult<Diff> parse_diff(const std::string& text) {
    ParseResult<Diff> out;
    Diff d;
    auto lines = detail::split_lines(text);
    Diff::Hunk* cur = nullptr;
    for (size_t i = 0; i < lines.size(); ++i) {
        const std::string& ln = lines[i];
        if (ln.rfind("---", 0) == 0 || ln.rfind("+++", 0) == 0) continue;
        if (ln.rfind("@@", 0) == 0) {
            Diff::Hunk h;
            // @@ -a,b +c,d @@
            int a = 0, b = 0, c = 0, dd = 0;
            if (std::sscanf(ln.c_str(), "@@ -%d,%d +%d,%d @@", &a, &b, &c, &dd) != 4) {
                if (std::sscanf(ln.c_str(), "@@ -%d +%d @@", &a, &c) == 2) {
                    b = 1;
                    dd = 1;
                } else {
                    out.diagnostics.push_back(
                        {static_cast<int>(i) + 1, 1, "malformed hunk header"});
                    return out;
                }
            }
            h.old_start = a;
            h.old_count = b;
            h.new_start = c;
            h.new_count = dd;
            d.hunks.push_back(h);
            cur = &d.hunks.back();
            continue;
        }
        if (ln.empty()) continue;
        if (!cur) {
            out.diagnostics.push_back({static_cast<int>(i) + 1, 1, "line outside hunk"});
            return out;
        }
        char tag = ln[0];
        if (tag != ' ' && tag != '-' && tag != '+') {
            out.diagnostics.push_back({static_cast<int>(i) + 1, 1, "expected ' ', '-' or '+'"});
            return out;
        }
        cur->lines.push_back(ln);
    }
    out.value = std::move(d);
    return out;
}

inline std::variant<std::string, Conflict> apply_diff(const std::string& text, const Diff& d) {
    auto old_lines = detail::split_lines(text);
    std::vector<std::string> result;
    size_t src = 0;  // cursor into old_lines
    for (size_t hi = 0; hi < d.hunks.size(); ++hi) {
        const auto& h = d.hunks[hi];
        size_t hunk_at = h.old_start > 0 ? static_cast<size_t>(h.old_start - 1) : 0;
        if (hunk_at < src)
            return Conflict{static_cast<int>(hi), "hunks overlap or are out of order"};
        while (src < hunk_at && src < old_lines.size()) result.push_back(old_lines[src++]);
        if (src != hunk_at)
            return Conflict{static_cast<int>(hi), "hunk start beyond end of file"};
        for (const auto& ln : h.lines) {
            char tag = ln[0];
            std::string body = ln.substr(1);
            if (tag == ' ' || tag == '-') {
                if (src >= old_lines.size() || old_lines[src] != body)
                    return Conflict{static_cast<int>(hi),
                                    "context mismatch at line " + std::to_string(src + 1)};
                if (tag == ' ') result.push_back(body);
                ++src;
            } else {  // '+'
                result.push_back(body);
            }
        }
    }
    while (src < old_lines.size()) result.push_back(old_lines[src++]);
    std::string out;
    for (const auto& ln : result) out += ln + "\n";
    return out;
}

}  // namespace miniscope
