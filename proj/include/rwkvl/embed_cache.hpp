#pragma once

#include <cstdint>
#include <list>
#include <stdexcept>
#include <unordered_map>

#include "error.hpp"
#include "linalg.hpp"
#include "store.hpp"

namespace rwkvl {

struct CacheStats {
    uint64_t hits = 0;
    uint64_t misses = 0;
    uint64_t evictions = 0;
    uint64_t resident_bytes = 0;
};

// Bounded LRU over embedding rows: a hit refreshes recency, a miss fetches
// exactly one row from the file and evicts the least recently used entry once
// over capacity. Resident bytes are counted at the stored (f16) width, the
// same unit the meter charges.
class LruEmbeddingCache {
  public:
    explicit LruEmbeddingCache(size_t capacity = 1000) : capacity_(capacity) {
        if (capacity == 0) throw std::invalid_argument("embedding cache: capacity must be >= 1");
    }

    Vector get_embedding(uint32_t token, const ModelFile& store, MemoryMeter* meter = nullptr) {
        auto it = map_.find(token);
        if (it != map_.end()) {
            order_.splice(order_.begin(), order_, it->second.order_it);
            hits_++;
            return it->second.row;
        }
        if (!store.dir().contains("emb")) throw IoError("embedding cache: no emb tensor");
        const TensorEntry& e = store.dir().find("emb");
        if (token >= e.shape[0])
            throw std::invalid_argument("embedding cache: token out of range");
        row_bytes_ = e.row_bytes();
        // evict before fetching so residency never exceeds capacity
        if (map_.size() >= capacity_) {
            const uint32_t victim = order_.back();
            order_.pop_back();
            map_.erase(victim);
            evictions_++;
            if (meter) meter->release(MemTag::embedding, row_bytes_);
        }
        Matrix fetched = store.fetch_rows("emb", {token}, meter);
        misses_++;
        order_.push_front(token);
        Entry entry;
        entry.order_it = order_.begin();
        entry.row.assign(fetched.row(0), fetched.row(0) + fetched.cols);
        Vector out = entry.row;
        map_.emplace(token, std::move(entry));
        return out;
    }

    CacheStats stats() const {
        return CacheStats{hits_, misses_, evictions_, map_.size() * row_bytes_};
    }

    size_t resident() const { return map_.size(); }
    size_t capacity() const { return capacity_; }
    bool contains(uint32_t token) const { return map_.count(token) != 0; }

    // Drops everything and returns the released resident bytes to the meter.
    void clear(MemoryMeter* meter = nullptr) {
        if (meter && !map_.empty()) meter->release(MemTag::embedding, map_.size() * row_bytes_);
        map_.clear();
        order_.clear();
    }

  private:
    struct Entry {
        std::list<uint32_t>::iterator order_it;
        Vector row;
    };

    size_t capacity_;
    std::list<uint32_t> order_;  // front = most recently used
    std::unordered_map<uint32_t, Entry> map_;
    uint64_t hits_ = 0, misses_ = 0, evictions_ = 0, row_bytes_ = 0;
};

}  // namespace rwkvl
