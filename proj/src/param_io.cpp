// Copyright 2026 the vapt-lab authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "vapt/param_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace vapt {
namespace {

constexpr std::size_t kHeaderBytes = 80;

std::uint32_t activation_code(Activation a) {
  switch (a) {
    case Activation::relu:
      return 0;
    case Activation::tanh:
      return 1;
    case Activation::identity:
      return 2;
  }
  return 0;
}

Activation activation_from_code(std::uint32_t code) {
  switch (code) {
    case 0:
      return Activation::relu;
    case 1:
      return Activation::tanh;
    case 2:
      return Activation::identity;
    default:
      throw FormatError("params: unknown activation code " + std::to_string(code));
  }
}

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(std::span<const double> values) {
    for (double v : values) u64(std::bit_cast<std::uint64_t>(v));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw FormatError("params: truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  void f64(std::span<double> out) {
    for (double& v : out) v = std::bit_cast<double>(u64());
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_params(const VaptParams& params) {
  params.validate();
  const PromptShapeConfig& s = params.shape;
  Writer w;
  w.bytes(kParamMagic, sizeof kParamMagic);
  w.u32(kParamFormatVersion);
  w.u32(activation_code(params.projector.activation));
  w.u32(params.layer_norm ? 1 : 0);
  w.u32(0);
  for (std::uint64_t v : {s.blocks, s.prompts, s.height, s.width, s.kernel, s.rank, s.dim}) w.u64(v);
  for (const BlockParams& b : params.blocks) {
    w.f64(b.conv_kernel.values());
    w.f64(b.alphas.values());
    w.f64(b.ln_gain.values());
    w.f64(b.ln_bias.values());
  }
  w.f64(params.projector.w1.values());
  w.f64(params.projector.w2.values());
  return w.take();
}

VaptParams decode_params(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(sizeof kParamMagic);
  if (std::memcmp(magic.data(), kParamMagic, sizeof kParamMagic) != 0) throw FormatError("params: bad magic");
  if (const auto version = r.u32(); version != kParamFormatVersion) {
    throw FormatError("params: unsupported format version " + std::to_string(version));
  }
  VaptParams p;
  p.projector.activation = activation_from_code(r.u32());
  const std::uint32_t ln = r.u32();
  if (ln > 1) throw FormatError("params: bad LayerNorm flag");
  p.layer_norm = ln == 1;
  if (r.u32() != 0) throw FormatError("params: reserved header field is not zero");
  PromptShapeConfig& s = p.shape;
  for (std::size_t* field : {&s.blocks, &s.prompts, &s.height, &s.width, &s.kernel, &s.rank, &s.dim}) {
    *field = static_cast<std::size_t>(r.u64());
  }
  for (std::size_t v : {s.blocks, s.prompts, s.height, s.width, s.kernel, s.rank, s.dim}) {
    if (v > (std::size_t{1} << 24)) throw FormatError("params: implausible dimension in header");
  }
  try {
    s.validate();
  } catch (const ShapeError& e) {
    throw FormatError(std::string("params: invalid header: ") + e.what());
  }
  // Reject headers whose payload cannot possibly be present before allocating.
  const std::uint64_t per_block = s.kernel * s.kernel + s.prompts * s.conv_tokens() + 2 * s.dim;
  const std::uint64_t expected = (s.blocks * per_block + 2 * s.rank * s.dim) * 8;
  if (bytes.size() != kHeaderBytes + expected) throw FormatError("params: payload size does not match the header");

  auto read = [&r](Shape shape) {
    Tensor t(std::move(shape));
    r.f64(t.values());
    return t;
  };
  for (std::size_t l = 0; l < s.blocks; ++l) {
    BlockParams b;
    b.conv_kernel = read({s.kernel, s.kernel});
    b.alphas = read({s.prompts, s.conv_tokens()});
    b.ln_gain = read({s.dim});
    b.ln_bias = read({s.dim});
    p.blocks.push_back(std::move(b));
  }
  p.projector.w1 = read({s.rank, s.dim});
  p.projector.w2 = read({s.dim, s.rank});
  if (!r.done()) throw FormatError("params: trailing bytes");
  return p;
}

nlohmann::ordered_json shape_to_json(const PromptShapeConfig& s) {
  nlohmann::ordered_json j;
  j["blocks"] = s.blocks;
  j["prompts"] = s.prompts;
  j["height"] = s.height;
  j["width"] = s.width;
  j["kernel"] = s.kernel;
  j["rank"] = s.rank;
  j["dim"] = s.dim;
  return j;
}

PromptShapeConfig shape_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("prompt shape: expected an object");
  static const std::set<std::string> known{"blocks", "prompts", "height", "width", "kernel", "rank", "dim"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw FormatError("prompt shape: unknown key \"" + key + "\"");
  }
  PromptShapeConfig s;
  auto get = [&j](const char* key, std::size_t& out) {
    if (!j.contains(key)) throw FormatError(std::string("prompt shape: missing key \"") + key + "\"");
    if (!j.at(key).is_number_unsigned()) throw FormatError(std::string("prompt shape: \"") + key + "\" must be a non-negative integer");
    out = j.at(key).get<std::size_t>();
  };
  get("blocks", s.blocks);
  get("prompts", s.prompts);
  get("height", s.height);
  get("width", s.width);
  get("kernel", s.kernel);
  get("rank", s.rank);
  get("dim", s.dim);
  return s;
}

nlohmann::ordered_json params_sidecar(const VaptParams& params) {
  nlohmann::ordered_json j;
  j["format"] = "vapt-params";
  j["version"] = kParamFormatVersion;
  j["activation"] = std::string(activation_name(params.projector.activation));
  j["layer_norm"] = params.layer_norm;
  j["shape"] = shape_to_json(params.shape);
  return j;
}

void save_params(const std::filesystem::path& path, const VaptParams& params) {
  const std::vector<std::uint8_t> bytes = encode_params(params);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("params: cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("params: write failed for " + path.string());
  }
  std::filesystem::path sidecar = path;
  sidecar += ".json";
  std::ofstream js(sidecar, std::ios::trunc);
  if (!js) throw FormatError("params: cannot open " + sidecar.string() + " for writing");
  js << params_sidecar(params).dump(2) << '\n';
}

VaptParams load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("params: cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  VaptParams p = decode_params(bytes);

  std::filesystem::path sidecar = path;
  sidecar += ".json";
  std::ifstream js(sidecar);
  if (!js) throw FormatError("params: missing sidecar " + sidecar.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(js);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("params: sidecar is not valid JSON: " + std::string(e.what()));
  }
  if (meta.value("format", "") != "vapt-params" || meta.value("version", 0u) != kParamFormatVersion) {
    throw FormatError("params: sidecar format/version mismatch");
  }
  if (!meta.contains("shape") || shape_from_json(meta.at("shape")) != p.shape ||
      meta.value("activation", "") != activation_name(p.projector.activation) ||
      meta.value("layer_norm", !p.layer_norm) != p.layer_norm) {
    throw FormatError("params: sidecar does not match the binary header");
  }
  return p;
}

}  // namespace vapt
