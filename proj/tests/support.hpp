#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "miniscope/ir.hpp"

namespace testsupport {

inline std::string corpus_dir() { return MINISCOPE_CORPUS_DIR; }

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw miniscope::Error("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline miniscope::Program load_program(const std::string& stem) {
    auto r = miniscope::parse_program(read_file(corpus_dir() + "/" + stem + ".mk"));
    if (!r.ok()) throw miniscope::Error(stem + ": " + r.error_text());
    return *r.value;
}

inline miniscope::TestCase load_poc(const std::string& stem, const miniscope::Program& p) {
    auto r = miniscope::parse_testcase(read_file(corpus_dir() + "/" + stem + ".poc"), p);
    if (!r.ok()) throw miniscope::Error(stem + ".poc: " + r.error_text());
    return *r.value;
}

inline const std::vector<std::string>& micro_stems() {
    static const std::vector<std::string> v = {
        "uaf_read",  "uaf_write",  "oob_read",      "oob_write",
        "oob_read_left", "oob_write_left", "invalid_free", "double_free",
        "null_deref", "gpf_load",  "assert_warn",   "assert_bug",
    };
    return v;
}

inline const std::vector<std::string>& fig_stems() {
    static const std::vector<std::string> v = {
        "fig2_tcindex", "fig4_rxrpc", "fig5_bfs", "fig6_tcp", "fig7_refcount",
    };
    return v;
}

}  // namespace testsupport
