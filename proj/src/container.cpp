#include "pstp/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace pstp {

namespace {

// This code assumes a little-endian host (asserted here once) so payloads can
// be memcpy'd straight into typed vectors.
static_assert(std::endian::native == std::endian::little,
              "container io assumes a little-endian host");

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

}  // namespace

std::string dtype_name(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }

Dtype dtype_from_name(const std::string& s) {
  if (s == "f32") return Dtype::F32;
  if (s == "f64") return Dtype::F64;
  throw DataError("unknown dtype in manifest: \"" + s + "\"");
}

std::size_t dtype_size(Dtype d) { return d == Dtype::F32 ? 4 : 8; }

TensorRecord TensorRecord::from_floats(std::string name, Shape shape,
                                       const std::vector<float>& v) {
  if (numel(shape) != static_cast<std::int64_t>(v.size()))
    throw DimMismatchError("tensor '" + name + "': shape " + shape_str(shape) +
                           " does not hold " + std::to_string(v.size()) + " elements");
  TensorRecord r;
  r.name = std::move(name);
  r.shape = std::move(shape);
  r.dtype = Dtype::F32;
  r.raw.resize(v.size() * sizeof(float));
  std::memcpy(r.raw.data(), v.data(), r.raw.size());
  return r;
}

TensorRecord TensorRecord::from_doubles(std::string name, Shape shape,
                                        const std::vector<double>& v) {
  if (numel(shape) != static_cast<std::int64_t>(v.size()))
    throw DimMismatchError("tensor '" + name + "': shape " + shape_str(shape) +
                           " does not hold " + std::to_string(v.size()) + " elements");
  TensorRecord r;
  r.name = std::move(name);
  r.shape = std::move(shape);
  r.dtype = Dtype::F64;
  r.raw.resize(v.size() * sizeof(double));
  std::memcpy(r.raw.data(), v.data(), r.raw.size());
  return r;
}

std::vector<float> TensorRecord::as_floats() const {
  if (dtype != Dtype::F32)
    throw DataError("tensor '" + name + "' holds f64 data, asked for f32");
  std::vector<float> v(raw.size() / sizeof(float));
  std::memcpy(v.data(), raw.data(), raw.size());
  return v;
}

std::vector<double> TensorRecord::as_doubles() const {
  if (dtype == Dtype::F64) {
    std::vector<double> v(raw.size() / sizeof(double));
    std::memcpy(v.data(), raw.data(), raw.size());
    return v;
  }
  // f32 payloads widen exactly.
  std::vector<float> f = as_floats();
  return std::vector<double>(f.begin(), f.end());
}

const TensorRecord& Container::tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw DataError("container has no tensor named '" + name + "'");
}

bool Container::has_tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

void write_container(const std::string& path, const Container& c) {
  nlohmann::json manifest;
  manifest["meta"] = c.meta;
  manifest["tensors"] = nlohmann::json::array();
  for (const auto& t : c.tensors) {
    const std::int64_t n = numel(t.shape);
    if (static_cast<std::size_t>(n) * dtype_size(t.dtype) != t.raw.size())
      throw DimMismatchError("tensor '" + t.name + "': payload of " +
                             std::to_string(t.raw.size()) + " bytes does not match shape " +
                             shape_str(t.shape));
    manifest["tensors"].push_back({{"name", t.name},
                                   {"shape", t.shape},
                                   {"dtype", dtype_name(t.dtype)},
                                   {"numel", n}});
  }
  const std::string mbytes = manifest.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  os.write(kContainerMagic, 4);
  put_u32(os, kContainerVersion);
  put_u64(os, static_cast<std::uint64_t>(mbytes.size()));
  os.write(mbytes.data(), static_cast<std::streamsize>(mbytes.size()));
  for (const auto& t : c.tensors)
    os.write(reinterpret_cast<const char*>(t.raw.data()),
             static_cast<std::streamsize>(t.raw.size()));
  if (!os) throw DataError("write failed: " + path);
}

Container read_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  is.seekg(0, std::ios::end);
  const std::uint64_t file_size = static_cast<std::uint64_t>(is.tellg());
  is.seekg(0);

  char magic[4] = {};
  if (file_size < 16 || !is.read(magic, 4) || std::memcmp(magic, kContainerMagic, 4) != 0)
    throw BadMagicError(path + ": not a tensor container (bad magic)");

  std::uint32_t version = 0;
  is.read(reinterpret_cast<char*>(&version), sizeof version);
  if (version != kContainerVersion)
    throw VersionMismatchError(path + ": format version " + std::to_string(version) +
                               ", this build reads version " +
                               std::to_string(kContainerVersion));

  std::uint64_t mlen = 0;
  is.read(reinterpret_cast<char*>(&mlen), sizeof mlen);
  if (16 + mlen > file_size)
    throw TruncatedPayloadError(path + ": manifest needs " + std::to_string(16 + mlen) +
                                " bytes, file has " + std::to_string(file_size));
  std::string mbytes(mlen, '\0');
  is.read(mbytes.data(), static_cast<std::streamsize>(mlen));

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mbytes);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path + ": manifest is not valid JSON: " + e.what());
  }
  if (!manifest.contains("meta") || !manifest.contains("tensors"))
    throw DataError(path + ": manifest missing 'meta' or 'tensors'");

  Container c;
  c.meta = manifest["meta"];

  // Validate the declared sizes before touching payloads so that a
  // shape/numel inconsistency is reported as such, not as truncation.
  std::uint64_t payload_bytes = 0;
  for (const auto& jt : manifest["tensors"]) {
    TensorRecord t;
    t.name = jt.at("name").get<std::string>();
    t.shape = jt.at("shape").get<Shape>();
    t.dtype = dtype_from_name(jt.at("dtype").get<std::string>());
    const std::int64_t declared = jt.at("numel").get<std::int64_t>();
    if (declared != numel(t.shape))
      throw DimMismatchError(path + ": tensor '" + t.name + "' declares numel " +
                             std::to_string(declared) + " but shape " + shape_str(t.shape) +
                             " has " + std::to_string(numel(t.shape)) + " elements");
    payload_bytes += static_cast<std::uint64_t>(declared) * dtype_size(t.dtype);
    c.tensors.push_back(std::move(t));
  }
  const std::uint64_t expected = 16 + mlen + payload_bytes;
  if (expected != file_size)
    throw TruncatedPayloadError(path + ": expected " + std::to_string(expected) +
                                " bytes (header " + std::to_string(16 + mlen) + " + payload " +
                                std::to_string(payload_bytes) + "), file has " +
                                std::to_string(file_size));

  for (auto& t : c.tensors) {
    t.raw.resize(static_cast<std::size_t>(numel(t.shape)) * dtype_size(t.dtype));
    is.read(reinterpret_cast<char*>(t.raw.data()), static_cast<std::streamsize>(t.raw.size()));
  }
  if (!is) throw TruncatedPayloadError(path + ": payload read failed");
  return c;
}

}  // namespace pstp
