#include <bit>
#include <cstring>
#include <fstream>

#include "fct/train.hpp"

namespace fct {

namespace {

constexpr char kMagic[4] = {'F', 'C', 'T', 'K'};
constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T value;
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) throw IoError("truncated checkpoint " + path.string());
  return value;
}

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  put<uint32_t>(out, kVersion);
  put<int64_t>(out, checkpoint.step);
  put<uint64_t>(out, checkpoint.config_hash);
  put<uint64_t>(out, checkpoint.class_ids.size());
  for (int c : checkpoint.class_ids) put<int64_t>(out, c);
  put<uint64_t>(out, checkpoint.params.size());
  for (const auto& [name, t] : checkpoint.params.items()) {
    put<uint64_t>(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<uint64_t>(out, t.shape().size());
    for (int64_t e : t.shape()) put<uint64_t>(out, static_cast<uint64_t>(e));
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * 8));
  }
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) throw IoError(path.string() + " is not a checkpoint");
  const auto version = get<uint32_t>(in, path);
  if (version != kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.step = get<int64_t>(in, path);
  ck.config_hash = get<uint64_t>(in, path);
  const auto n_classes = get<uint64_t>(in, path);
  for (uint64_t i = 0; i < n_classes; ++i) ck.class_ids.push_back(static_cast<int>(get<int64_t>(in, path)));
  const auto n_tensors = get<uint64_t>(in, path);
  for (uint64_t i = 0; i < n_tensors; ++i) {
    const auto len = get<uint64_t>(in, path);
    if (len > 4096) throw IoError("corrupt tensor name in " + path.string());
    std::string name(len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(len));
    const auto rank = get<uint64_t>(in, path);
    if (rank > 8) throw IoError("corrupt tensor rank in " + path.string());
    Shape shape;
    for (uint64_t r = 0; r < rank; ++r) shape.push_back(static_cast<int64_t>(get<uint64_t>(in, path)));
    std::vector<double> data(static_cast<size_t>(numel(shape)));
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * 8));
    if (in.gcount() != static_cast<std::streamsize>(data.size() * 8)) {
      throw IoError("truncated checkpoint " + path.string());
    }
    ck.params.add(name, Tensor::from(shape, std::move(data)));
  }
  return ck;
}

}  // namespace fct
