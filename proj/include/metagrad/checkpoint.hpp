// Retained optimizer states for the reverse pass and their on-disk format.
//
// Binary layout (all integers and doubles little-endian):
//
//   offset  size  field
//   0       8     magic "MGSTATE\0"
//   8       4     format version (1)
//   12      4     block count B
//   16      8     block length (param_dim, or N for value vectors)
//   24      8     step index (signed; -1 when not a training state)
//   32      4·B   block kinds (BlockKind codes), in storage order
//   ...     8·B·L raw doubles, block after block
#ifndef METAGRAD_CHECKPOINT_HPP
#define METAGRAD_CHECKPOINT_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <vector>

#include "metagrad/optim.hpp"

namespace metagrad {

enum class RetentionPolicy {
  /// Keep every state s_0..s_{T-1}; no recomputation in the reverse pass.
  RetainAll,
  /// Keep the right spine of a binary bisection of [0, T): s_0, s_{T/2},
  /// s_{3T/4}, ..., s_{T-1}. The reverse pass rematerializes the rest by
  /// recursive bisection with at most ⌈log₂T⌉ + 1 live states.
  Bisection,
};

enum class BlockKind : std::uint32_t {
  Params = 0,
  Velocity = 1,
  FirstMoment = 2,
  SecondMoment = 3,
  Values = 4,
};

/// Split point of the reverse segment [begin, end), end - begin >= 2.
inline long bisection_split(long begin, long end) {
  return begin + (end - begin) / 2;
}

class CheckpointStore {
 public:
  CheckpointStore() = default;
  CheckpointStore(RetentionPolicy policy, long total_steps);

  RetentionPolicy policy() const { return policy_; }
  long total_steps() const { return total_steps_; }

  /// Whether the forward pass must keep the state at `step`.
  bool wants(long step) const;

  void put(const OptimizerState& s);
  bool contains(long step) const { return states_.count(step) != 0; }
  /// Throws Io with the step index when the state is missing.
  const OptimizerState& at(long step) const;
  const std::map<long, OptimizerState>& states() const { return states_; }
  std::size_t size() const { return states_.size(); }

  void set_final(OptimizerState s) { final_ = std::move(s); }
  const OptimizerState& final_state() const;
  bool has_final() const { return final_.has_value(); }

  /// Spills every retained state (and the final state) as
  /// `<dir>/state_<step>.bin` plus `<dir>/store.json`.
  void save(const std::filesystem::path& dir) const;
  static CheckpointStore load(const std::filesystem::path& dir,
                              const UpdateRule& rule);

 private:
  RetentionPolicy policy_ = RetentionPolicy::Bisection;
  long total_steps_ = 0;
  std::map<long, OptimizerState> states_;
  std::optional<OptimizerState> final_;
};

void write_state(const std::filesystem::path& path, const OptimizerState& s,
                 const UpdateRule& rule);
OptimizerState read_state(const std::filesystem::path& path,
                          const UpdateRule& rule);

/// A single value vector (e.g. an influence vector) in the same format.
void write_values(const std::filesystem::path& path, const VectorXd& values);
VectorXd read_values(const std::filesystem::path& path);

}  // namespace metagrad

#endif  // METAGRAD_CHECKPOINT_HPP
