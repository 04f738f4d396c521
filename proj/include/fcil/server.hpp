#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "fcil/client.hpp"
#include "fcil/nn.hpp"
#include "fcil/prototypes.hpp"

namespace fcil {

// The server's persistent class -> prototype store. Entries are only ever
// added or updated, never deleted.
struct KnowledgeEntry {
    Tensor prototype;
    std::size_t total_count = 0;  // sum of uploaded sample counts at last fusion
    int last_fused_task = 0;
    int first_task = 0;           // task at which the class entered the base

    friend bool operator==(const KnowledgeEntry&, const KnowledgeEntry&) = default;
};

class KnowledgeBase {
public:
    bool empty() const { return entries_.empty(); }
    std::size_t size() const { return entries_.size(); }
    bool contains(int class_id) const { return entries_.count(class_id) > 0; }
    const KnowledgeEntry& at(int class_id) const;
    void put(int class_id, KnowledgeEntry entry);
    const std::map<int, KnowledgeEntry>& entries() const { return entries_; }

    // Flatten to the list shape clients consume.
    PrototypeList to_prototype_list() const;

    friend bool operator==(const KnowledgeBase&, const KnowledgeBase&) = default;

private:
    std::map<int, KnowledgeEntry> entries_;
};

struct GlobalState {
    ModelParams params;
    KnowledgeBase kb;
    int round = 0;
};

// Mean of the uploaded models. Heads are first aligned to the largest class
// count with zero-padded rows (the neutral element of averaging), so clients
// that have not seen a class contribute nothing to its row. Weighted mode
// scales by each client's sample count.
ModelParams fedavg(std::span<const ClientUpdate> updates, bool sample_weighted = false);

// Prototypical knowledge fusion for task t. Per uploaded class c the
// horizontal mean m_c weights client prototypes by their sample counts; a
// class already known from an earlier task is blended as
// beta * m_c + (1 - beta) * previous, a class first seen at task t is
// overwritten with m_c. Classes absent from the uploads carry forward.
KnowledgeBase fuse_prototypes(const KnowledgeBase& kb, std::span<const ClientUpdate> updates,
                              int task, double beta);

struct Distribution {
    ModelParams params;
    PrototypeList prototypes;
    std::size_t bytes_downloaded = 0;  // per-client payload size
};

// Snapshot of the global model and knowledge base as one downlink payload.
Distribution distribute(const GlobalState& global);

}  // namespace fcil
