#include "ncdssm/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace ncdssm::ckpt {

using Json = nlohmann::ordered_json;

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  if (!in) throw DataFormatError("checkpoint: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void save(const Checkpoint& c, const std::string& path) {
  Json index;
  index["format_version"] = c.format_version;
  index["step"] = c.step;
  index["rng_state"] = c.rng_state;
  index["config"] = c.config;
  Json table = Json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : c.tensors) {
    Json row;
    row["name"] = name;
    row["rows"] = m.rows();
    row["cols"] = m.cols();
    row["offset"] = offset;
    row["dtype"] = "f64";
    table.push_back(row);
    offset += static_cast<std::uint64_t>(m.size());
  }
  index["tensors"] = table;
  const std::string header = index.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataFormatError("checkpoint: cannot open for writing: " + path);
    put_u64(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& [name, m] : c.tensors) {
      static_assert(sizeof(double) == 8);
      out.write(reinterpret_cast<const char*>(m.data()),
                static_cast<std::streamsize>(m.size() * 8));
    }
    if (!out) throw DataFormatError("checkpoint: write failed: " + path);
  }
  std::remove(path.c_str());
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw DataFormatError("checkpoint: cannot move into place: " + path);
}

Checkpoint load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataFormatError("checkpoint: cannot open: " + path);
  const std::uint64_t header_len = get_u64(in);
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw DataFormatError("checkpoint: truncated index");
  Json index;
  try {
    index = Json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw DataFormatError(std::string("checkpoint: bad index: ") + e.what());
  }

  Checkpoint c;
  c.format_version = index.at("format_version").get<int>();
  if (c.format_version != 1)
    throw DataFormatError("checkpoint: unsupported format version " +
                          std::to_string(c.format_version));
  c.step = index.at("step").get<long>();
  c.rng_state = index.at("rng_state").get<std::string>();
  c.config = index.at("config");
  for (const auto& row : index.at("tensors")) {
    const auto name = row.at("name").get<std::string>();
    const long rows = row.at("rows").get<long>();
    const long cols = row.at("cols").get<long>();
    if (row.at("dtype").get<std::string>() != "f64")
      throw DataFormatError("checkpoint: unsupported dtype for " + name);
    Mat m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * 8));
    if (!in) throw DataFormatError("checkpoint: truncated payload at " + name);
    c.tensors.emplace_back(name, std::move(m));
  }
  return c;
}

Checkpoint from_store(const ParamStore& params, long step, const std::string& rng_state,
                      Json config) {
  Checkpoint c;
  c.step = step;
  c.rng_state = rng_state;
  c.config = std::move(config);
  for (const auto& name : params.names()) {
    const Param& p = params.at(name);
    c.tensors.emplace_back(name, p.value);
    if (!p.trainable) continue;
    c.tensors.emplace_back("adam.m." + name, p.adam_m);
    c.tensors.emplace_back("adam.v." + name, p.adam_v);
    c.tensors.emplace_back("adam.t." + name,
                           Mat::Constant(1, 1, static_cast<double>(p.adam_steps)));
  }
  return c;
}

void into_store(const Checkpoint& c, ParamStore& params) {
  for (const auto& [name, m] : c.tensors) {
    if (name.rfind("adam.m.", 0) == 0) {
      params.at(name.substr(7)).adam_m = m;
    } else if (name.rfind("adam.v.", 0) == 0) {
      params.at(name.substr(7)).adam_v = m;
    } else if (name.rfind("adam.t.", 0) == 0) {
      params.at(name.substr(7)).adam_steps = static_cast<long>(m(0, 0));
    } else {
      Param& p = params.at(name);
      if (p.value.rows() != m.rows() || p.value.cols() != m.cols())
        throw DataFormatError("checkpoint: shape mismatch for " + name);
      p.value = m;
    }
  }
}

}  // namespace ncdssm::ckpt
