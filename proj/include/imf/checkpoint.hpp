#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "imf/nn.hpp"
#include "imf/optim.hpp"

namespace imf {

// Checkpoint container, format "imf-checkpoint/1" (see README for the layout):
// a JSON object holding named parameter tensors, named buffers (BatchNorm
// running stats) and optional Adam state, with raw little-endian scalar bytes
// base64-encoded so round-trips are bit-exact.

std::string base64_encode(const unsigned char* bytes, std::size_t n);
std::vector<unsigned char> base64_decode(const std::string& text);

template <class T>
void save_checkpoint(const std::string& path, const std::vector<TensorEntry<T>>& params,
                     const std::vector<BufferEntry<T>>& buffers, const Adam<T>* optimizer,
                     const nlohmann::json& meta);

// Fills the given registries in place; shapes must match. Returns the stored
// meta object.
template <class T>
nlohmann::json load_checkpoint(const std::string& path, std::vector<TensorEntry<T>>& params,
                               std::vector<BufferEntry<T>>& buffers, Adam<T>* optimizer);

}  // namespace imf
