#pragma once

#include <string>

#include "lime/binary_io.hpp"
#include "lime/config_json.hpp"

namespace lime {

inline constexpr char kCheckpointMagic[8] = {'L', 'I', 'M', 'E', 'M', 'D', 'L', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout: magic, version u32, config block (u32 byte length + JSON text),
/// parameter count u32, then per parameter: name length u16, name, rank u8,
/// dims u32 each, f32 little-endian scalars.
template <class T>
std::string serialize_checkpoint(const Model<T>& m) {
  ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 8));
  w.u32(kCheckpointVersion);
  const std::string cfg = model_config_to_json(m.config()).dump();
  w.u32(static_cast<std::uint32_t>(cfg.size()));
  w.bytes(cfg);
  const auto& items = m.params().items();
  w.u32(static_cast<std::uint32_t>(items.size()));
  for (const auto& [name, p] : items) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(p->rank()));
    for (std::size_t d : p->shape()) w.u32(static_cast<std::uint32_t>(d));
    for (T v : p->values()) w.f32(static_cast<float>(v));
  }
  return w.take();
}

template <class T>
Model<T> parse_checkpoint(std::string_view bytes, const std::string& source = "checkpoint") {
  ByteReader r(bytes, source);
  if (r.bytes(8, "magic") != std::string_view(kCheckpointMagic, 8)) r.fail("bad magic, not a model checkpoint");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t cfg_len = r.u32("config length");
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(json::parse(r.bytes(cfg_len, "config block")));
  } catch (const json::exception& e) {
    r.fail(std::string("unreadable config block: ") + e.what());
  }
  Model<T> m(cfg);
  const std::uint32_t count = r.u32("parameter count");
  if (count != m.params().items().size())
    r.fail("checkpoint has " + std::to_string(count) + " parameters, config implies " +
           std::to_string(m.params().items().size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16("name length");
    const std::string name(r.bytes(len, "parameter name"));
    auto p = m.params().find(name);
    if (!p) r.fail("unknown parameter '" + name + "'");
    const std::uint8_t rank = r.u8("rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u32("dimension");
    if (shape != p->shape())
      r.fail("parameter '" + name + "' has shape " + shape_str(shape) + ", expected " + shape_str(p->shape()));
    for (T& v : p->values()) v = static_cast<T>(r.f32("parameter value"));
  }
  if (!r.done()) r.fail("trailing bytes after parameters");
  return m;
}

template <class T>
void save_checkpoint(const Model<T>& m, const std::string& path) {
  write_file(path, serialize_checkpoint(m));
}

template <class T>
Model<T> load_checkpoint(const std::string& path) {
  return parse_checkpoint<T>(read_file(path), path);
}

}  // namespace lime
