#include "fcil/prototypes.hpp"

#include <string>

#include "fcil/errors.hpp"
#include "fcil/wire.hpp"

namespace fcil {

const PrototypeEntry& PrototypeList::at(int class_id) const {
    auto it = entries_.find(class_id);
    if (it == entries_.end()) {
        throw ArgumentError("prototype list: no entry for class " + std::to_string(class_id));
    }
    return it->second;
}

void PrototypeList::upsert(PrototypeEntry entry) {
    if (entry.class_id < 0) {
        throw ArgumentError("prototype list: negative class id");
    }
    if (entry.sample_count == 0) {
        throw ArgumentError("prototype list: sample count must be >= 1 for class " +
                            std::to_string(entry.class_id));
    }
    entry.prototype.require_rank(1, "prototype");
    entry.prototype.require_finite("prototype for class " + std::to_string(entry.class_id));
    entries_[entry.class_id] = std::move(entry);
}

void PrototypeList::merge_from(const PrototypeList& other) {
    for (const auto& [id, entry] : other.entries_) {
        entries_[id] = entry;
    }
}

std::vector<int> PrototypeList::class_ids() const {
    std::vector<int> ids;
    ids.reserve(entries_.size());
    for (const auto& [id, entry] : entries_) {
        ids.push_back(id);
    }
    return ids;
}

std::vector<std::uint8_t> serialize_prototypes(const PrototypeList& list) {
    std::vector<std::uint8_t> out;
    std::size_t feature_dim = 0;
    if (!list.empty()) {
        feature_dim = list.entries().begin()->second.prototype.size();
        for (const auto& [id, entry] : list.entries()) {
            if (entry.prototype.size() != feature_dim) {
                throw DimensionError("serialize_prototypes: mixed prototype widths");
            }
        }
    }
    wire::put_u32(out, static_cast<std::uint32_t>(list.size()));
    wire::put_u32(out, static_cast<std::uint32_t>(feature_dim));
    for (const auto& [id, entry] : list.entries()) {
        wire::put_u32(out, static_cast<std::uint32_t>(id));
        wire::put_u32(out, static_cast<std::uint32_t>(entry.sample_count));
        for (double v : entry.prototype.data()) {
            wire::put_f64(out, v);
        }
    }
    return out;
}

PrototypeList deserialize_prototypes(std::span<const std::uint8_t> bytes) {
    wire::Reader reader(bytes);
    constexpr std::uint32_t cap = 1u << 20;
    const std::uint32_t count = reader.u32("prototypes header");
    const std::uint32_t feature_dim = reader.u32("prototypes header");
    if (count > cap || feature_dim > cap || (count > 0 && feature_dim == 0)) {
        reader.fail("prototypes header: implausible counts " + std::to_string(count) + "/" +
                    std::to_string(feature_dim));
    }
    PrototypeList list;
    for (std::uint32_t i = 0; i < count; ++i) {
        PrototypeEntry entry;
        entry.class_id = static_cast<int>(reader.u32("prototype entry"));
        entry.sample_count = reader.u32("prototype entry");
        if (entry.sample_count == 0) {
            reader.fail("prototype entry: zero sample count for class " +
                        std::to_string(entry.class_id));
        }
        Tensor proto({feature_dim});
        for (double& v : proto.data()) {
            const std::size_t at = reader.offset();
            v = reader.f64("prototype payload");
            if (!std::isfinite(v)) {
                throw FormatError("prototype payload: non-finite value at byte offset " +
                                  std::to_string(at));
            }
        }
        entry.prototype = std::move(proto);
        if (list.contains(entry.class_id)) {
            reader.fail("prototype entry: duplicate class " + std::to_string(entry.class_id));
        }
        list.upsert(std::move(entry));
    }
    reader.expect_end("prototypes");
    return list;
}

std::size_t prototype_wire_bytes(const PrototypeList& list) {
    if (list.empty()) {
        return 0;
    }
    std::size_t feature_dim = list.entries().begin()->second.prototype.size();
    return 8 + list.size() * (8 + 8 * feature_dim);
}

}  // namespace fcil
