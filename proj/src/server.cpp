#include "fcil/server.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fcil/errors.hpp"

namespace fcil {

const KnowledgeEntry& KnowledgeBase::at(int class_id) const {
    auto it = entries_.find(class_id);
    if (it == entries_.end()) {
        throw ArgumentError("knowledge base: no entry for class " + std::to_string(class_id));
    }
    return it->second;
}

void KnowledgeBase::put(int class_id, KnowledgeEntry entry) {
    if (class_id < 0) {
        throw ArgumentError("knowledge base: negative class id");
    }
    entry.prototype.require_rank(1, "knowledge base prototype");
    entry.prototype.require_finite("knowledge base prototype for class " + std::to_string(class_id));
    entries_[class_id] = std::move(entry);
}

PrototypeList KnowledgeBase::to_prototype_list() const {
    PrototypeList list;
    for (const auto& [class_id, entry] : entries_) {
        list.upsert(PrototypeEntry{class_id, entry.prototype, entry.total_count,
                                   entry.last_fused_task});
    }
    return list;
}

ModelParams fedavg(std::span<const ClientUpdate> updates, bool sample_weighted) {
    if (updates.empty()) {
        throw ArgumentError("fedavg: no updates");
    }
    std::size_t max_classes = 0;
    for (const ClientUpdate& u : updates) {
        max_classes = std::max(max_classes, u.params.num_classes());
    }
    std::vector<ModelParams> aligned;
    aligned.reserve(updates.size());
    std::vector<double> weights;
    weights.reserve(updates.size());
    for (const ClientUpdate& u : updates) {
        aligned.push_back(grow_classifier(u.params, max_classes, 0.0, 0));
        weights.push_back(sample_weighted ? static_cast<double>(u.num_samples) : 1.0);
    }
    return average_params_weighted(aligned, weights);
}

KnowledgeBase fuse_prototypes(const KnowledgeBase& kb, std::span<const ClientUpdate> updates,
                              int task, double beta) {
    if (!(beta >= 0.0 && beta <= 1.0)) {
        throw ArgumentError("fuse_prototypes: beta must be in [0, 1]");
    }

    // Pool the uploads per class, then apply the |D_k,c| / |D_c| weights.
    // Weighting each prototype directly keeps the one-uploader case exact:
    // its weight is exactly 1.
    std::map<int, std::vector<std::pair<std::size_t, const Tensor*>>> pooled;
    for (const ClientUpdate& u : updates) {
        for (const auto& [class_id, entry] : u.prototypes.entries()) {
            if (entry.sample_count == 0) {
                throw ArgumentError("fuse_prototypes: zero sample count for class " +
                                    std::to_string(class_id));
            }
            pooled[class_id].emplace_back(entry.sample_count, &entry.prototype);
        }
    }

    KnowledgeBase fused = kb;
    for (const auto& [class_id, uploads] : pooled) {
        std::size_t total = 0;
        for (const auto& [count, proto] : uploads) {
            total += count;
            if (!proto->same_shape(*uploads.front().second)) {
                throw DimensionError("fuse_prototypes: mixed prototype widths for class " +
                                     std::to_string(class_id));
            }
        }
        if (total == 0) {
            throw ArgumentError("fuse_prototypes: zero total count for class " +
                                std::to_string(class_id));
        }
        Tensor horizontal = Tensor::zeros(uploads.front().second->shape());
        for (const auto& [count, proto] : uploads) {
            const double weight = static_cast<double>(count) / static_cast<double>(total);
            for (std::size_t j = 0; j < horizontal.size(); ++j) {
                horizontal(j) += weight * (*proto)(j);
            }
        }

        KnowledgeEntry next;
        next.total_count = total;
        next.last_fused_task = task;
        if (kb.contains(class_id) && kb.at(class_id).first_task < task) {
            // Temporal fusion: the class is previous knowledge.
            const KnowledgeEntry& prev = kb.at(class_id);
            if (!prev.prototype.same_shape(horizontal)) {
                throw DimensionError("fuse_prototypes: stored prototype width mismatch for class " +
                                     std::to_string(class_id));
            }
            Tensor blended(horizontal.shape());
            for (std::size_t j = 0; j < blended.size(); ++j) {
                blended(j) = beta * horizontal(j) + (1.0 - beta) * prev.prototype(j);
            }
            next.prototype = std::move(blended);
            next.first_task = prev.first_task;
        } else {
            next.prototype = std::move(horizontal);
            next.first_task = kb.contains(class_id) ? kb.at(class_id).first_task : task;
        }
        fused.put(class_id, std::move(next));
    }
    return fused;
}

Distribution distribute(const GlobalState& global) {
    Distribution out;
    out.params = global.params;
    out.prototypes = global.kb.to_prototype_list();
    out.bytes_downloaded =
        serialize_params(out.params).size() + prototype_wire_bytes(out.prototypes);
    return out;
}

}  // namespace fcil
