#include "metagrad/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace metagrad {

namespace {

constexpr std::array<char, 8> kMagic{'M', 'G', 'S', 'T', 'A', 'T', 'E', '\0'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big)
    std::reverse(bytes.begin(), bytes.end());
  out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const std::filesystem::path& path) {
  std::array<unsigned char, sizeof(T)> bytes;
  if (!in.read(reinterpret_cast<char*>(bytes.data()), sizeof(T)))
    fail(ErrorKind::Io, path.string() + ": truncated state file");
  if constexpr (std::endian::native == std::endian::big)
    std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

struct RawBlocks {
  long step = -1;
  std::vector<BlockKind> kinds;
  std::vector<VectorXd> blocks;
};

void write_blocks(const std::filesystem::path& path, const RawBlocks& raw) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  const std::uint64_t len =
      raw.blocks.empty() ? 0 : static_cast<std::uint64_t>(raw.blocks[0].size());
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(raw.blocks.size()));
  put_le<std::uint64_t>(out, len);
  put_le<std::int64_t>(out, raw.step);
  for (BlockKind k : raw.kinds)
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(k));
  for (const auto& b : raw.blocks) {
    require(static_cast<std::uint64_t>(b.size()) == len,
            "state blocks must share one length");
    for (Index i = 0; i < b.size(); ++i) put_le<double>(out, b[i]);
  }
  if (!out) fail(ErrorKind::Io, "write failed for '" + path.string() + "'");
}

RawBlocks read_blocks(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic)
    fail(ErrorKind::Io, path.string() + ": bad magic bytes");
  const auto version = get_le<std::uint32_t>(in, path);
  if (version != kVersion)
    fail(ErrorKind::Io, path.string() + ": unsupported format version " +
                            std::to_string(version));
  const auto count = get_le<std::uint32_t>(in, path);
  const auto len = get_le<std::uint64_t>(in, path);
  RawBlocks raw;
  raw.step = static_cast<long>(get_le<std::int64_t>(in, path));
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto code = get_le<std::uint32_t>(in, path);
    if (code > static_cast<std::uint32_t>(BlockKind::Values))
      fail(ErrorKind::Io, path.string() + ": unknown block kind");
    raw.kinds.push_back(static_cast<BlockKind>(code));
  }
  for (std::uint32_t k = 0; k < count; ++k) {
    VectorXd b(static_cast<Index>(len));
    for (Index i = 0; i < b.size(); ++i) b[i] = get_le<double>(in, path);
    raw.blocks.push_back(std::move(b));
  }
  if (in.peek() != std::char_traits<char>::eof())
    fail(ErrorKind::Io, path.string() + ": trailing bytes");
  return raw;
}

std::vector<BlockKind> layout_of(const UpdateRule& rule) {
  switch (rule.kind) {
    case RuleKind::Sgd: return {BlockKind::Params};
    case RuleKind::SgdMomentum: return {BlockKind::Params, BlockKind::Velocity};
    case RuleKind::Adam:
      return {BlockKind::Params, BlockKind::FirstMoment,
              BlockKind::SecondMoment};
  }
  return {BlockKind::Params};
}

}  // namespace

void write_state(const std::filesystem::path& path, const OptimizerState& s,
                 const UpdateRule& rule) {
  RawBlocks raw;
  raw.step = s.step;
  raw.kinds = layout_of(rule);
  require(raw.kinds.size() == s.moments.size() + 1,
          "state does not match the update rule layout");
  raw.blocks.push_back(s.params);
  for (const auto& m : s.moments) raw.blocks.push_back(m);
  write_blocks(path, raw);
}

OptimizerState read_state(const std::filesystem::path& path,
                          const UpdateRule& rule) {
  RawBlocks raw = read_blocks(path);
  if (raw.kinds != layout_of(rule))
    fail(ErrorKind::Io,
         path.string() + ": block layout does not match the update rule");
  OptimizerState s;
  s.step = raw.step;
  s.params = std::move(raw.blocks[0]);
  for (std::size_t k = 1; k < raw.blocks.size(); ++k)
    s.moments.push_back(std::move(raw.blocks[k]));
  return s;
}

void write_values(const std::filesystem::path& path, const VectorXd& values) {
  write_blocks(path, RawBlocks{-1, {BlockKind::Values}, {values}});
}

VectorXd read_values(const std::filesystem::path& path) {
  RawBlocks raw = read_blocks(path);
  if (raw.kinds.size() != 1 || raw.kinds[0] != BlockKind::Values)
    fail(ErrorKind::Io, path.string() + ": not a value-vector file");
  return std::move(raw.blocks[0]);
}

CheckpointStore::CheckpointStore(RetentionPolicy policy, long total_steps)
    : policy_(policy), total_steps_(total_steps) {
  require(total_steps >= 0, "checkpoint store needs total_steps >= 0");
}

bool CheckpointStore::wants(long step) const {
  if (step < 0 || step >= total_steps_) return false;
  if (policy_ == RetentionPolicy::RetainAll) return true;
  long begin = 0;
  while (true) {
    if (step == begin) return true;
    if (total_steps_ - begin <= 1 || step < begin) return false;
    begin = bisection_split(begin, total_steps_);
  }
}

void CheckpointStore::put(const OptimizerState& s) {
  require(s.step >= 0 && s.step < total_steps_,
          "checkpoint step out of range");
  states_.insert_or_assign(s.step, s);
}

const OptimizerState& CheckpointStore::at(long step) const {
  auto it = states_.find(step);
  if (it == states_.end())
    fail(ErrorKind::Io,
         "checkpoint store has no state for step " + std::to_string(step));
  return it->second;
}

const OptimizerState& CheckpointStore::final_state() const {
  if (!final_)
    fail(ErrorKind::Io, "checkpoint store has no final state");
  return *final_;
}

void CheckpointStore::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  // Layout is only needed to label blocks on disk, so derive it from the
  // number of moment blocks.
  auto rule_for = [](const OptimizerState& s) {
    UpdateRule rule;
    rule.kind = s.moments.empty()       ? RuleKind::Sgd
                : s.moments.size() == 1 ? RuleKind::SgdMomentum
                                        : RuleKind::Adam;
    return rule;
  };
  nlohmann::json index;
  index["format_version"] = kVersion;
  index["policy"] =
      policy_ == RetentionPolicy::RetainAll ? "retain-all" : "bisection";
  index["total_steps"] = total_steps_;
  index["steps"] = nlohmann::json::array();
  for (const auto& [step, s] : states_) {
    write_state(dir / ("state_" + std::to_string(step) + ".bin"), s,
                rule_for(s));
    index["steps"].push_back(step);
  }
  if (final_) {
    write_state(dir / "state_final.bin", *final_, rule_for(*final_));
    index["final"] = "state_final.bin";
  }
  std::ofstream out(dir / "store.json", std::ios::trunc);
  out << index.dump(2) << '\n';
  if (!out) fail(ErrorKind::Io, "cannot write store index in " + dir.string());
}

CheckpointStore CheckpointStore::load(const std::filesystem::path& dir,
                                      const UpdateRule& rule) {
  std::ifstream in(dir / "store.json");
  if (!in) fail(ErrorKind::Io, "no checkpoint store at " + dir.string());
  nlohmann::json index;
  try {
    in >> index;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Io, (dir / "store.json").string() + ": " + e.what());
  }
  const std::string policy = index.at("policy").get<std::string>();
  CheckpointStore store(policy == "retain-all" ? RetentionPolicy::RetainAll
                                               : RetentionPolicy::Bisection,
                        index.at("total_steps").get<long>());
  for (long step : index.at("steps")) {
    OptimizerState s =
        read_state(dir / ("state_" + std::to_string(step) + ".bin"), rule);
    if (s.step != step)
      fail(ErrorKind::Io, "state file for step " + std::to_string(step) +
                              " records step " + std::to_string(s.step));
    store.put(s);
  }
  if (index.contains("final"))
    store.set_final(read_state(dir / index["final"].get<std::string>(), rule));
  return store;
}

}  // namespace metagrad
