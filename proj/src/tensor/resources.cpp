#include "chag/tensor/resources.hpp"

#include <algorithm>

namespace chag {

namespace {

thread_local std::shared_ptr<ResourceTracker> t_tracker =
    std::make_shared<ResourceTracker>();
thread_local std::string t_tag{tags::other};

std::uint64_t lookup(const std::map<std::string, std::uint64_t>& m,
                     std::string_view key) {
  auto it = m.find(std::string(key));
  return it == m.end() ? 0 : it->second;
}

}  // namespace

std::uint64_t AllocStats::tag_peak(std::string_view tag) const {
  return lookup(per_tag_peak, tag);
}

std::uint64_t AllocStats::tag_live(std::string_view tag) const {
  return lookup(per_tag_live, tag);
}

void ResourceTracker::on_alloc(const std::string& tag, std::uint64_t bytes) {
  alloc_.live_bytes += bytes;
  alloc_.peak_bytes = std::max(alloc_.peak_bytes, alloc_.live_bytes);
  auto& live = alloc_.per_tag_live[tag];
  live += bytes;
  auto& peak = alloc_.per_tag_peak[tag];
  peak = std::max(peak, live);
}

void ResourceTracker::on_free(const std::string& tag, std::uint64_t bytes) {
  alloc_.live_bytes -= bytes;
  alloc_.per_tag_live[tag] -= bytes;
}

void ResourceTracker::add_flops(const std::string& tag, std::uint64_t flops) {
  flops_[tag] += flops;
}

std::uint64_t ResourceTracker::tag_flops(std::string_view tag) const {
  return lookup(flops_, tag);
}

void ResourceTracker::reset_peaks() {
  alloc_.peak_bytes = alloc_.live_bytes;
  alloc_.per_tag_peak = alloc_.per_tag_live;
  flops_.clear();
}

std::uint64_t ResourceStats::tag_flops(std::string_view tag) const {
  return lookup(flops, tag);
}

ResourceStats snapshot(const ResourceTracker& tracker) {
  return ResourceStats{tracker.alloc(), tracker.flops()};
}

const std::shared_ptr<ResourceTracker>& current_tracker() { return t_tracker; }

TrackerScope::TrackerScope(std::shared_ptr<ResourceTracker> tracker)
    : previous_(std::move(t_tracker)) {
  t_tracker = std::move(tracker);
}

TrackerScope::~TrackerScope() { t_tracker = std::move(previous_); }

const std::string& current_tag() { return t_tag; }

TagScope::TagScope(std::string_view tag) : previous_(std::move(t_tag)) {
  t_tag = std::string(tag);
}

TagScope::~TagScope() { t_tag = std::move(previous_); }

}  // namespace chag
