#include "autoiv/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "autoiv/errors.hpp"

namespace autoiv {

static_assert(std::endian::native == std::endian::little,
              "parameter blobs are written as little-endian float64");

nlohmann::json parameter_manifest(const ParameterStore& store) {
  nlohmann::json out = nlohmann::json::array();
  std::size_t offset = 0;
  for (ParamId id = 0; id < store.size(); ++id) {
    const Tensor& v = store.value(id);
    out.push_back({{"name", store.name(id)},
                   {"rows", v.rows()},
                   {"cols", v.cols()},
                   {"offset", offset}});
    offset += v.size();
  }
  return out;
}

void write_parameter_blob(const ParameterStore& store, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& v : store.values()) {
    out.write(reinterpret_cast<const char*>(v.data().data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw IoError("write failed for " + path.string());
}

ParameterStore read_parameters(const nlohmann::json& manifest, const std::filesystem::path& blob) {
  std::ifstream in(blob, std::ios::binary);
  if (!in) throw IoError("cannot open " + blob.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % sizeof(double) != 0) throw IoError("blob size not a multiple of 8: " + blob.string());
  const std::size_t total = bytes.size() / sizeof(double);

  ParameterStore store;
  for (const auto& entry : manifest) {
    const auto rows = entry.at("rows").get<std::size_t>();
    const auto cols = entry.at("cols").get<std::size_t>();
    const auto offset = entry.at("offset").get<std::size_t>();
    if (offset + rows * cols > total) {
      throw IoError("blob " + blob.string() + " truncated at " + entry.at("name").get<std::string>());
    }
    std::vector<double> data(rows * cols);
    std::memcpy(data.data(), bytes.data() + offset * sizeof(double), data.size() * sizeof(double));
    store.add(entry.at("name").get<std::string>(), Tensor(rows, cols, std::move(data)));
  }
  return store;
}

}  // namespace autoiv
