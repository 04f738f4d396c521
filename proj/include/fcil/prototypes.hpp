#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "fcil/tensor.hpp"

namespace fcil {

// One class prototype: the mean feature vector of that class's samples,
// together with how many samples produced it and which task it came from.
struct PrototypeEntry {
    int class_id = 0;
    Tensor prototype;           // rank 1, feature_dim
    std::size_t sample_count = 0;
    int task_of_origin = 0;

    friend bool operator==(const PrototypeEntry&, const PrototypeEntry&) = default;
};

// class_id -> entry, at most one per class. Ordered so every iteration over
// a list is deterministic.
class PrototypeList {
public:
    bool empty() const { return entries_.empty(); }
    std::size_t size() const { return entries_.size(); }
    bool contains(int class_id) const { return entries_.count(class_id) > 0; }

    const PrototypeEntry& at(int class_id) const;

    // Insert or replace.
    void upsert(PrototypeEntry entry);

    // Upsert every entry of `other` into this list; entries only present
    // here survive untouched.
    void merge_from(const PrototypeList& other);

    std::vector<int> class_ids() const;

    const std::map<int, PrototypeEntry>& entries() const { return entries_; }

    friend bool operator==(const PrototypeList&, const PrototypeList&) = default;

private:
    std::map<int, PrototypeEntry> entries_;
};

// Wire format, little-endian:
//   u32 entry count, u32 feature_dim
//   per entry: u32 class_id, u32 sample_count, feature_dim x f64 prototype
// task_of_origin is local bookkeeping and does not travel.
std::vector<std::uint8_t> serialize_prototypes(const PrototypeList& list);
PrototypeList deserialize_prototypes(std::span<const std::uint8_t> bytes);

// Transmitted size of a list; an empty list costs nothing on the wire.
std::size_t prototype_wire_bytes(const PrototypeList& list);

}  // namespace fcil
