// SPDX-License-Identifier: Apache-2.0

#include "msp/util.hpp"

#include "msp/common.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace msp {

std::string_view to_string(Granularity g) {
    switch (g) {
    case Granularity::Token: return "TOKEN";
    case Granularity::Phrase: return "PHRASE";
    case Granularity::Sentence: return "SENTENCE";
    }
    return "?";
}

Granularity parse_granularity(std::string_view s) {
    if (s == "TOKEN" || s == "T" || s == "token") return Granularity::Token;
    if (s == "PHRASE" || s == "P" || s == "phrase") return Granularity::Phrase;
    if (s == "SENTENCE" || s == "S" || s == "sentence") return Granularity::Sentence;
    throw Error(fmt::format("unknown granularity '{}'", s));
}

std::string_view to_string(Task t) {
    switch (t) {
    case Task::MLM: return "MLM";
    case Task::MRFR: return "MRFR";
    case Task::MOC: return "MOC";
    case Task::IFRS: return "IFRS";
    case Task::TITP: return "TITP";
    case Task::TITS: return "TITS";
    case Task::ITM_HS: return "ITM_HS";
    }
    return "?";
}

Task parse_task(std::string_view s) {
    for (Task t : kAllTasks)
        if (to_string(t) == s) return t;
    throw Error(fmt::format("unknown task name '{}'", s));
}

bool is_image_grounded(Task t) {
    return t == Task::MRFR || t == Task::MOC || t == Task::IFRS || t == Task::TITP || t == Task::TITS;
}

std::string TaskSet::str() const {
    std::string out;
    for (Task t : tasks()) {
        if (!out.empty()) out += ' ';
        out += to_string(t);
    }
    return out;
}

TaskSet TaskSet::parse(std::string_view text) {
    TaskSet set;
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) set.insert(parse_task(word));
    return set;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

std::string file_digest(const std::filesystem::path& path) { return hex64(fnv1a64(read_file(path))); }

std::string fixed6(double v) { return fmt::format("{:.6f}", v); }

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(fmt::format("cannot open '{}'", path.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(fmt::format("cannot write '{}'", path.string()));
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
}

void init_logging() {
    const char* env = std::getenv("MSP_LOG_LEVEL");
    std::string level = env ? env : "info";
    if (level == "debug")
        spdlog::set_level(spdlog::level::debug);
    else if (level == "warn")
        spdlog::set_level(spdlog::level::warn);
    else if (level == "error")
        spdlog::set_level(spdlog::level::err);
    else
        spdlog::set_level(spdlog::level::info);
}

} // namespace msp
