#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "poet/common.hpp"
#include "poet/data.hpp"

namespace poet {

// Plain-text clip schema:
//   header line "T J", then T*J lines of "x y z" (joint-major within a frame),
//   clips separated by one or more blank lines.
// ntu-style files carry 25 joints per frame, shrec-style 22.

inline int joints_for_format(const std::string& format_tag) {
    if (format_tag == "ntu-style") return 25;
    if (format_tag == "shrec-style") return 22;
    throw ConfigError("unknown skeleton format tag '" + format_tag + "'");
}

// Uniform temporal resampling: out[i] = src[floor(i * T_src / T_out)].
inline Tensor<double> resample_frames(const Tensor<double>& src, int target_t) {
    const int ts = src.dim(0), J = src.dim(1);
    Tensor<double> out({target_t, J, 3});
    for (int i = 0; i < target_t; ++i) {
        const int s = static_cast<int>((static_cast<long>(i) * ts) / target_t);
        for (int j = 0; j < J; ++j)
            for (int d = 0; d < 3; ++d) out.at(i, j, d) = src.at(s, j, d);
    }
    return out;
}

inline std::vector<SkeletonSequence> load_skeleton_file(const std::string& path,
                                                        const std::string& format_tag,
                                                        int target_t) {
    const int expect_j = joints_for_format(format_tag);
    if (target_t < 1) throw ConfigError("load_skeleton_file: target T must be >= 1");
    std::ifstream in(path);
    if (!in) throw IoError("cannot open skeleton file '" + path + "'");

    std::vector<SkeletonSequence> clips;
    std::string line;
    int line_no = 0;
    auto fail = [&](const std::string& what) {
        throw ParseError(path + ":" + std::to_string(line_no) + ": " + what);
    };

    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream hdr(line);
        int t = 0, j = 0;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;  // blank
        if (!(hdr >> t >> j)) fail("expected clip header 'T J'");
        std::string extra;
        if (hdr >> extra) fail("trailing tokens after clip header");
        if (t < 1) fail("clip must have at least one frame");
        if (j != expect_j)
            fail("clip declares " + std::to_string(j) + " joints, " + format_tag +
                 " requires " + std::to_string(expect_j));
        Tensor<double> frames({t, j, 3});
        for (int f = 0; f < t; ++f)
            for (int jj = 0; jj < j; ++jj) {
                if (!std::getline(in, line)) {
                    ++line_no;
                    fail("clip truncated: expected " + std::to_string(t * j) +
                         " joint lines");
                }
                ++line_no;
                std::istringstream ls(line);
                double x, y, z;
                if (!(ls >> x >> y >> z)) fail("expected three decimal reals 'x y z'");
                if (ls >> extra) fail("trailing tokens after joint coordinates");
                frames.at(f, jj, 0) = x;
                frames.at(f, jj, 1) = y;
                frames.at(f, jj, 2) = z;
            }
        SkeletonSequence s;
        s.frames = resample_frames(frames, target_t);
        clips.push_back(std::move(s));
    }
    return clips;
}

inline void save_skeleton_file(const std::string& path,
                               const std::vector<SkeletonSequence>& clips) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write skeleton file '" + path + "'");
    out.precision(17);
    for (std::size_t i = 0; i < clips.size(); ++i) {
        const auto& f = clips[i].frames;
        if (i) out << "\n";
        out << f.dim(0) << " " << f.dim(1) << "\n";
        for (int t = 0; t < f.dim(0); ++t)
            for (int j = 0; j < f.dim(1); ++j)
                out << f.at(t, j, 0) << " " << f.at(t, j, 1) << " " << f.at(t, j, 2)
                    << "\n";
    }
    if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace poet
