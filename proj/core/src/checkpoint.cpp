#include "lcat/checkpoint.hpp"

#include <fstream>

#include <json.hpp>

#include "lcat/error.hpp"
#include "lcat/tensor.hpp"

namespace lcat {

namespace {
using nlohmann::json;
}

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const CheckpointMeta& meta) {
  json header;
  header["format"] = "lcat-checkpoint-v1";
  header["epoch"] = meta.epoch;
  header["rng_state"] = meta.rng_state_hex;
  header["config"] =
      meta.config_json.empty() ? json::object() : json::parse(meta.config_json);
  json tensors = json::array();
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& t = params.tensor(i);
    tensors.push_back({{"name", params.name(i)},
                       {"shape", t.shape()},
                       {"requires_grad", t.requires_grad()}});
  }
  header["tensors"] = tensors;

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(Err::Io, "checkpoint: cannot open '" + path + "' for writing");
  os << header.dump() << '\n';
  static_assert(sizeof(float) == 4);
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& data = params.tensor(i).data();
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * 4));
  }
  if (!os) fail(Err::Io, "checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(Err::Io, "checkpoint: cannot open '" + path + "'");
  std::string header_line;
  if (!std::getline(is, header_line))
    fail(Err::Format, "checkpoint: missing header line");
  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::parse_error& e) {
    fail(Err::Format, std::string("checkpoint: invalid header JSON: ") + e.what());
  }
  if (header.value("format", "") != "lcat-checkpoint-v1")
    fail(Err::Format, "checkpoint: unknown format tag");

  Checkpoint out;
  try {
    out.meta.epoch = header.at("epoch").get<int>();
    out.meta.rng_state_hex = header.at("rng_state").get<std::string>();
    out.meta.config_json = header.at("config").dump();
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const bool requires_grad = entry.at("requires_grad").get<bool>();
      std::vector<float> data(static_cast<size_t>(shape_numel(shape)));
      if (!is.read(reinterpret_cast<char*>(data.data()),
                   static_cast<std::streamsize>(data.size() * 4)))
        fail(Err::Format, "checkpoint: truncated payload for '" + name + "'");
      out.params.add(name,
                     Tensor::from_data(shape, std::move(data), requires_grad));
    }
  } catch (const json::exception& e) {
    fail(Err::Format, std::string("checkpoint: malformed header: ") + e.what());
  }
  is.peek();
  if (!is.eof()) fail(Err::Format, "checkpoint: trailing bytes after payload");
  return out;
}

}  // namespace lcat
