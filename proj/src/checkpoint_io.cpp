#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include <json.hpp>

#include "pcbmerge/checkpoint.hpp"
#include "pcbmerge/error.hpp"

namespace pcbmerge {

namespace {

using json = nlohmann::json;

// Read-only private mapping of a whole file.
class MappedFile {
 public:
  explicit MappedFile(const std::filesystem::path& path) {
    fd_ = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd_ < 0) {
      fail(ErrorCode::IoFailure, "cannot open " + path.string() + ": " + std::strerror(errno));
    }
    struct stat st {};
    if (::fstat(fd_, &st) != 0) {
      const int err = errno;
      ::close(fd_);
      fail(ErrorCode::IoFailure, "cannot stat " + path.string() + ": " + std::strerror(err));
    }
    size_ = static_cast<std::size_t>(st.st_size);
    if (size_ > 0) {
      void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd_, 0);
      if (p == MAP_FAILED) {
        const int err = errno;
        ::close(fd_);
        fail(ErrorCode::IoFailure, "cannot map " + path.string() + ": " + std::strerror(err));
      }
      data_ = static_cast<const std::byte*>(p);
    }
  }
  MappedFile(const MappedFile&) = delete;
  MappedFile& operator=(const MappedFile&) = delete;
  ~MappedFile() {
    if (data_) ::munmap(const_cast<std::byte*>(data_), size_);
    if (fd_ >= 0) ::close(fd_);
  }

  std::span<const std::byte> bytes() const { return {data_, size_}; }

 private:
  int fd_ = -1;
  const std::byte* data_ = nullptr;
  std::size_t size_ = 0;
};

struct HeaderEntry {
  std::string name;
  DType dtype;
  Shape shape;
  std::uint64_t begin;
  std::uint64_t end;
};

std::uint64_t read_u64_le(const std::byte* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<std::uint64_t>(p[i]);
  return v;
}

Shape parse_shape(const std::string& name, const json& j) {
  if (!j.is_array()) fail(ErrorCode::MalformedHeader, "tensor '" + name + "': shape is not a list");
  Shape shape;
  std::size_t numel = 1;
  for (const auto& d : j) {
    if (!d.is_number_unsigned()) {
      fail(ErrorCode::MalformedHeader, "tensor '" + name + "': shape entries must be nonnegative integers");
    }
    const auto dim = d.get<std::uint64_t>();
    if (dim != 0 && numel > std::numeric_limits<std::size_t>::max() / dim) {
      fail(ErrorCode::MalformedHeader, "tensor '" + name + "': element count overflows");
    }
    numel *= dim;
    shape.push_back(static_cast<std::size_t>(dim));
  }
  return shape;
}

std::vector<HeaderEntry> parse_header(std::string_view text,
                                      std::optional<std::map<std::string, std::string>>& metadata) {
  std::set<std::string> seen;
  bool duplicate = false;
  std::string duplicate_name;
  json::parser_callback_t track_keys = [&](int depth, json::parse_event_t event, json& parsed) {
    if (depth == 1 && event == json::parse_event_t::key) {
      auto key = parsed.get<std::string>();
      if (!seen.insert(key).second) {
        duplicate = true;
        duplicate_name = key;
      }
    }
    return true;
  };

  json header;
  try {
    header = json::parse(text.begin(), text.end(), track_keys);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::MalformedHeader, std::string("header is not valid JSON: ") + e.what());
  }
  if (!header.is_object()) fail(ErrorCode::MalformedHeader, "header is not a JSON object");
  if (duplicate) fail(ErrorCode::MalformedHeader, "duplicate tensor name '" + duplicate_name + "'");

  std::vector<HeaderEntry> entries;
  for (const auto& [name, info] : header.items()) {
    if (name == "__metadata__") {
      if (!info.is_object()) fail(ErrorCode::MalformedHeader, "__metadata__ is not an object");
      std::map<std::string, std::string> meta;
      for (const auto& [k, v] : info.items()) {
        if (!v.is_string()) fail(ErrorCode::MalformedHeader, "__metadata__ values must be strings");
        meta.emplace(k, v.get<std::string>());
      }
      metadata = std::move(meta);
      continue;
    }
    if (name.empty()) fail(ErrorCode::MalformedHeader, "empty tensor name");
    if (!info.is_object()) fail(ErrorCode::MalformedHeader, "tensor '" + name + "': entry is not an object");
    if (!info.contains("dtype") || !info["dtype"].is_string()) {
      fail(ErrorCode::MalformedHeader, "tensor '" + name + "': missing dtype");
    }
    const auto dtype_str = info["dtype"].get<std::string>();
    const auto dtype = parse_dtype(dtype_str);
    if (!dtype) fail(ErrorCode::UnsupportedDtype, "tensor '" + name + "': unsupported dtype " + dtype_str);
    if (!info.contains("shape")) fail(ErrorCode::MalformedHeader, "tensor '" + name + "': missing shape");
    Shape shape = parse_shape(name, info["shape"]);
    const auto& offs = info.contains("data_offsets") ? info["data_offsets"] : json();
    if (!offs.is_array() || offs.size() != 2 || !offs[0].is_number_unsigned() ||
        !offs[1].is_number_unsigned()) {
      fail(ErrorCode::MalformedHeader, "tensor '" + name + "': data_offsets must be [begin, end]");
    }
    entries.push_back({name, *dtype, std::move(shape), offs[0].get<std::uint64_t>(),
                       offs[1].get<std::uint64_t>()});
  }
  return entries;
}

// Byte ranges must tile [0, payload) exactly.
void check_layout(std::vector<HeaderEntry>& entries, std::uint64_t payload) {
  std::sort(entries.begin(), entries.end(), [](const HeaderEntry& a, const HeaderEntry& b) {
    return a.begin != b.begin ? a.begin < b.begin : a.end < b.end;
  });
  std::uint64_t cursor = 0;
  for (const auto& e : entries) {
    if (e.end < e.begin) {
      fail(ErrorCode::OverlappingOffsets, "tensor '" + e.name + "': data_offsets end before begin");
    }
    if (e.end > payload) {
      fail(ErrorCode::OverlappingOffsets, "tensor '" + e.name + "': data_offsets exceed payload of " +
                                              std::to_string(payload) + " bytes");
    }
    if (e.begin != cursor) {
      fail(ErrorCode::OverlappingOffsets,
           "tensor '" + e.name + "': data_offsets " + (e.begin < cursor ? "overlap" : "leave a gap") +
               " at byte " + std::to_string(e.begin));
    }
    const std::uint64_t expected = shape_numel(e.shape) * dtype_size(e.dtype);
    if (e.end - e.begin != expected) {
      fail(ErrorCode::MalformedHeader, "tensor '" + e.name + "': byte length " +
                                           std::to_string(e.end - e.begin) + " does not match shape " +
                                           shape_to_string(e.shape));
    }
    cursor = e.end;
  }
  if (cursor != payload) {
    fail(ErrorCode::OverlappingOffsets, "payload has " + std::to_string(payload - cursor) +
                                            " trailing bytes not covered by any tensor");
  }
}

}  // namespace

const Tensor& Checkpoint::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) fail(ErrorCode::MissingTensor, "no tensor named '" + name + "'");
  return it->second;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto file = std::make_shared<const MappedFile>(path);
  const auto bytes = file->bytes();
  if (bytes.size() < 8) {
    fail(ErrorCode::MalformedHeader, path.string() + ": file shorter than the 8-byte header length");
  }
  const std::uint64_t header_len = read_u64_le(bytes.data());
  if (header_len > kMaxHeaderBytes) {
    fail(ErrorCode::MalformedHeader, path.string() + ": header of " + std::to_string(header_len) +
                                         " bytes exceeds the " + std::to_string(kMaxHeaderBytes) +
                                         " byte limit");
  }
  if (header_len > bytes.size() - 8) {
    fail(ErrorCode::MalformedHeader, path.string() + ": header length " + std::to_string(header_len) +
                                         " exceeds file size");
  }
  const std::string_view text(reinterpret_cast<const char*>(bytes.data() + 8), header_len);

  Checkpoint ckpt;
  ckpt.source_path = path;
  auto entries = parse_header(text, ckpt.header_metadata);
  const std::uint64_t payload_start = 8 + header_len;
  check_layout(entries, bytes.size() - payload_start);

  for (auto& e : entries) {
    auto view = bytes.subspan(payload_start + e.begin, e.end - e.begin);
    ckpt.tensors.emplace(e.name, Tensor::from_shared(e.dtype, std::move(e.shape), file, view));
  }
  return ckpt;
}

std::vector<std::byte> encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::ordered_json header = nlohmann::ordered_json::object();
  if (ckpt.header_metadata) {
    auto meta = nlohmann::ordered_json::object();
    for (const auto& [k, v] : *ckpt.header_metadata) meta[k] = v;
    header["__metadata__"] = std::move(meta);
  }
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.empty()) fail(ErrorCode::InvalidArgument, "tensor names must be non-empty");
    nlohmann::ordered_json entry;
    entry["dtype"] = dtype_name(t.dtype());
    entry["shape"] = t.shape();
    entry["data_offsets"] = {offset, offset + t.nbytes()};
    header[name] = std::move(entry);
    offset += t.nbytes();
  }
  std::string text = header.dump();
  // pad with spaces so the payload starts 8-byte aligned
  text.append((8 - text.size() % 8) % 8, ' ');

  std::vector<std::byte> out(8 + text.size() + offset);
  std::uint64_t n = text.size();
  for (int i = 0; i < 8; ++i) out[i] = static_cast<std::byte>((n >> (8 * i)) & 0xFF);
  std::memcpy(out.data() + 8, text.data(), text.size());
  std::byte* cursor = out.data() + 8 + text.size();
  for (const auto& [name, t] : ckpt.tensors) {
    if (t.nbytes()) std::memcpy(cursor, t.bytes().data(), t.nbytes());
    cursor += t.nbytes();
  }
  return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  // write beside the target and rename so readers never see a partial file
  auto tmp = path;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoFailure, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      fail(ErrorCode::IoFailure, "short write to " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    fail(ErrorCode::IoFailure, "cannot move checkpoint into place at " + path.string());
  }
}

std::vector<std::string> TensorSchema::mergeable_names() const {
  std::vector<std::string> names;
  for (const auto& [name, e] : entries) {
    if (e.mergeable) names.push_back(name);
  }
  return names;
}

std::size_t TensorSchema::mergeable_numel() const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries) {
    if (e.mergeable) n += shape_numel(e.shape);
  }
  return n;
}

TensorSchema validate_compatibility(std::span<const Checkpoint> ckpts, MissingPolicy policy,
                                    std::vector<std::string>* warnings) {
  if (ckpts.empty()) fail(ErrorCode::InvalidArgument, "no checkpoints to validate");

  std::set<std::string> names;
  for (const auto& c : ckpts) {
    for (const auto& [name, t] : c.tensors) names.insert(name);
  }

  TensorSchema schema;
  for (const auto& name : names) {
    const Tensor* reference = nullptr;
    bool missing = false;
    for (std::size_t i = 0; i < ckpts.size(); ++i) {
      auto it = ckpts[i].tensors.find(name);
      if (it == ckpts[i].tensors.end()) {
        if (policy == MissingPolicy::Error) {
          fail(ErrorCode::MissingTensor,
               "tensor '" + name + "' missing from checkpoint " + std::to_string(i));
        }
        if (warnings) {
          warnings->push_back("skipping tensor '" + name + "': missing from checkpoint " +
                              std::to_string(i));
        }
        missing = true;
        break;
      }
      const Tensor& t = it->second;
      if (!reference) {
        reference = &t;
        continue;
      }
      if (t.shape() != reference->shape()) {
        fail(ErrorCode::ShapeMismatch, "tensor '" + name + "' has shape " + shape_to_string(t.shape()) +
                                           " in checkpoint " + std::to_string(i) + " but " +
                                           shape_to_string(reference->shape()) + " in checkpoint 0");
      }
      if (is_floating(t.dtype()) != is_floating(reference->dtype()) ||
          (!is_floating(t.dtype()) && t.dtype() != reference->dtype())) {
        fail(ErrorCode::DtypeMismatch, "tensor '" + name + "' has dtype " +
                                           std::string(dtype_name(t.dtype())) + " in checkpoint " +
                                           std::to_string(i) + " but " +
                                           std::string(dtype_name(reference->dtype())) + " earlier");
      }
    }
    if (missing) continue;
    schema.entries.emplace(name, SchemaEntry{reference->shape(), reference->dtype(),
                                             is_floating(reference->dtype())});
  }
  return schema;
}

}  // namespace pcbmerge
