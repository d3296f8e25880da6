#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <string_view>

namespace chag {

/// Component tags used for allocation and FLOP attribution.
namespace tags {
inline constexpr std::string_view tokenize = "tokenize";
inline constexpr std::string_view aggregate = "aggregate";
inline constexpr std::string_view vit = "vit";
inline constexpr std::string_view decoder = "decoder";
// Parameters, inputs and anything created outside a component scope.
inline constexpr std::string_view other = "other";
}  // namespace tags

struct AllocStats {
  std::uint64_t live_bytes = 0;
  std::uint64_t peak_bytes = 0;
  std::map<std::string, std::uint64_t> per_tag_live;
  // High-water mark of the bytes attributed to each tag.
  std::map<std::string, std::uint64_t> per_tag_peak;

  std::uint64_t tag_peak(std::string_view tag) const;
  std::uint64_t tag_live(std::string_view tag) const;
};

/// Allocation and forward-FLOP bookkeeping for one simulated device.
class ResourceTracker {
 public:
  void on_alloc(const std::string& tag, std::uint64_t bytes);
  void on_free(const std::string& tag, std::uint64_t bytes);
  void add_flops(const std::string& tag, std::uint64_t flops);

  const AllocStats& alloc() const { return alloc_; }
  const std::map<std::string, std::uint64_t>& flops() const { return flops_; }
  std::uint64_t tag_flops(std::string_view tag) const;

  /// Drops high-water marks to the current live values and clears FLOPs.
  void reset_peaks();

 private:
  AllocStats alloc_;
  std::map<std::string, std::uint64_t> flops_;
};

/// Snapshot of a tracker, safe to move across threads.
struct ResourceStats {
  AllocStats alloc;
  std::map<std::string, std::uint64_t> flops;

  std::uint64_t tag_flops(std::string_view tag) const;
};

ResourceStats snapshot(const ResourceTracker& tracker);

/// Tracker receiving allocations made on the calling thread.
const std::shared_ptr<ResourceTracker>& current_tracker();

/// Installs `tracker` for the calling thread for the scope's lifetime.
class TrackerScope {
 public:
  explicit TrackerScope(std::shared_ptr<ResourceTracker> tracker);
  ~TrackerScope();
  TrackerScope(const TrackerScope&) = delete;
  TrackerScope& operator=(const TrackerScope&) = delete;

 private:
  std::shared_ptr<ResourceTracker> previous_;
};

const std::string& current_tag();

/// Attributes allocations and FLOPs on this thread to `tag`.
class TagScope {
 public:
  explicit TagScope(std::string_view tag);
  ~TagScope();
  TagScope(const TagScope&) = delete;
  TagScope& operator=(const TagScope&) = delete;

 private:
  std::string previous_;
};

}  // namespace chag
