#pragma once

// Model checkpoint files.
//
// Layout (all integers little-endian):
//   bytes [0, 8)    magic "KANCKPT1"
//   bytes [8, 16)   uint64 header length H
//   bytes [16, 16+H) UTF-8 JSON header: architecture, tau, tensor table
//   remainder       float64 values of each tensor in header order, row-major
//
// See README.md for the header fields.

#include <filesystem>
#include <string>

#include "kancal/network.hpp"

namespace kancal {

struct Checkpoint {
    Model model;
    double tau = 1.0;
    std::string metadata_json = "{}";  // free-form object stored under "metadata"
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace kancal
