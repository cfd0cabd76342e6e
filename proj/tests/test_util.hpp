#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>

#include "rdlab/model.hpp"
#include "rdlab/prompting.hpp"

namespace testutil {

inline std::filesystem::path fresh_dir(const std::string& tag)
{
    const auto dir = std::filesystem::temp_directory_path() /
                     ("rdlab_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Narrow model used where the default width would only cost time.
inline rdlab::ModelConfig small_config(int vocab_size, std::uint64_t seed = 1)
{
    rdlab::ModelConfig c;
    c.d_vision = 16;
    c.d_lm = 32;
    c.lm_layers = 2;
    c.lm_heads = 2;
    c.vision_layers = 1;
    c.vision_heads = 2;
    c.vocab_size = vocab_size;
    c.seed = seed;
    return c;
}

} // namespace testutil
