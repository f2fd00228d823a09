#include "graft/corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace graft {

NgramKey NgramKey::from(std::span<const uint32_t> tuple) {
    if (tuple.size() < 2 || tuple.size() > kMaxNgramOrder) {
        throw std::invalid_argument("NgramKey: order out of range");
    }
    NgramKey k;
    k.order = static_cast<uint8_t>(tuple.size());
    std::copy(tuple.begin(), tuple.end(), k.ids.begin());
    return k;
}

void CompressionMap::set(uint32_t from, uint32_t to) { table_[from] = to; }

void CompressionMap::validate_idempotent() const {
    for (const auto& [from, to] : table_) {
        if (apply(to) != to) {
            throw std::runtime_error("compression map not idempotent at id " +
                                     std::to_string(from));
        }
    }
}

CompressionMap CompressionMap::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open compression map: " + path);
    CompressionMap p;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        uint64_t from, to;
        if (!(ls >> from >> to)) {
            throw std::runtime_error("compression map: malformed line " +
                                     std::to_string(lineno));
        }
        p.set(static_cast<uint32_t>(from), static_cast<uint32_t>(to));
    }
    p.validate_idempotent();
    return p;
}

namespace {

TokenSequence ingest_text_int(const std::string& path, uint32_t vocab_size) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open corpus: " + path);
    TokenSequence seq;
    std::string line;
    std::size_t line_offset = 0;
    while (std::getline(in, line)) {
        std::size_t doc_start = seq.ids.size();
        std::size_t pos = 0;
        const std::size_t len = line.size();
        while (pos < len) {
            while (pos < len && std::isspace(static_cast<unsigned char>(line[pos]))) ++pos;
            if (pos >= len) break;
            const std::size_t tok_start = pos;
            uint64_t value = 0;
            bool any = false;
            while (pos < len && !std::isspace(static_cast<unsigned char>(line[pos]))) {
                const char c = line[pos];
                if (c < '0' || c > '9') {
                    throw std::runtime_error("malformed integer at byte offset " +
                                             std::to_string(line_offset + pos));
                }
                value = value * 10 + static_cast<uint64_t>(c - '0');
                if (value > 0xFFFFFFFFULL) {
                    throw std::runtime_error("token id overflow at byte offset " +
                                             std::to_string(line_offset + tok_start));
                }
                any = true;
                ++pos;
            }
            if (!any) continue;
            if (value >= vocab_size) {
                throw std::runtime_error("token id " + std::to_string(value) +
                                         " >= vocab size " + std::to_string(vocab_size) +
                                         " at byte offset " + std::to_string(line_offset + tok_start));
            }
            seq.ids.push_back(static_cast<uint32_t>(value));
        }
        if (seq.ids.size() > doc_start) seq.doc_starts.push_back(doc_start);
        line_offset += len + 1;
    }
    if (seq.ids.empty()) throw std::runtime_error("empty corpus: " + path);
    return seq;
}

uint32_t read_u32_le(std::istream& in, std::size_t offset, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw std::runtime_error(std::string("truncated ") + what + " at byte offset " +
                                 std::to_string(offset));
    }
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

TokenSequence ingest_binary_u32(const std::string& path, uint32_t vocab_size) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open corpus: " + path);
    std::size_t offset = 0;
    const uint32_t ndocs = read_u32_le(in, offset, "doc count");
    offset += 4;
    if (ndocs == 0) throw std::runtime_error("empty corpus: " + path);
    std::vector<uint32_t> lengths(ndocs);
    for (uint32_t d = 0; d < ndocs; ++d) {
        lengths[d] = read_u32_le(in, offset, "doc length");
        offset += 4;
        if (lengths[d] == 0) {
            throw std::runtime_error("empty document " + std::to_string(d) + " in " + path);
        }
    }
    TokenSequence seq;
    for (uint32_t d = 0; d < ndocs; ++d) {
        seq.doc_starts.push_back(seq.ids.size());
        for (uint32_t i = 0; i < lengths[d]; ++i) {
            const uint32_t id = read_u32_le(in, offset, "token id");
            if (id >= vocab_size) {
                throw std::runtime_error("token id " + std::to_string(id) +
                                         " >= vocab size " + std::to_string(vocab_size) +
                                         " at byte offset " + std::to_string(offset));
            }
            offset += 4;
            seq.ids.push_back(id);
        }
    }
    return seq;
}

}  // namespace

TokenSequence ingest_corpus(const std::string& path, CorpusFormat format,
                            uint32_t vocab_size) {
    switch (format) {
        case CorpusFormat::TextInt: return ingest_text_int(path, vocab_size);
        case CorpusFormat::BinaryU32: return ingest_binary_u32(path, vocab_size);
    }
    throw std::invalid_argument("unknown corpus format");
}

TokenSequence compress(const TokenSequence& seq, const CompressionMap& p) {
    TokenSequence out;
    out.doc_starts = seq.doc_starts;
    out.ids.resize(seq.ids.size());
    for (std::size_t i = 0; i < seq.ids.size(); ++i) out.ids[i] = p.apply(seq.ids[i]);
    return out;
}

namespace {

void count_doc_range(const TokenSequence& seq, const std::vector<int>& orders,
                     std::size_t doc_lo, std::size_t doc_hi, NgramCountTable& out) {
    for (std::size_t d = doc_lo; d < doc_hi; ++d) {
        const std::size_t begin = seq.doc_begin(d);
        const std::size_t end = seq.doc_end(d);
        for (std::size_t t = begin; t < end; ++t) {
            for (int n : orders) {
                if (t + 1 < begin + static_cast<std::size_t>(n)) continue;
                NgramKey key = NgramKey::from(
                    {seq.ids.data() + (t + 1 - static_cast<std::size_t>(n)),
                     static_cast<std::size_t>(n)});
                ++out.counts[key];
            }
        }
    }
}

}  // namespace

NgramCountTable count_ngrams(const TokenSequence& seq, const std::vector<int>& orders,
                             unsigned num_threads) {
    for (int n : orders) {
        if (n < 2 || n > kMaxNgramOrder) {
            throw std::invalid_argument("count_ngrams: order out of range: " +
                                        std::to_string(n));
        }
    }
    const std::size_t ndocs = seq.doc_count();
    if (num_threads <= 1 || ndocs < 2) {
        NgramCountTable table;
        count_doc_range(seq, orders, 0, ndocs, table);
        return table;
    }
    const unsigned workers = std::min<unsigned>(num_threads, static_cast<unsigned>(ndocs));
    std::vector<NgramCountTable> shards(workers);
    std::vector<std::thread> threads;
    for (unsigned w = 0; w < workers; ++w) {
        const std::size_t lo = ndocs * w / workers;
        const std::size_t hi = ndocs * (w + 1) / workers;
        threads.emplace_back([&, lo, hi, w] { count_doc_range(seq, orders, lo, hi, shards[w]); });
    }
    for (auto& t : threads) t.join();
    NgramCountTable merged = std::move(shards[0]);
    for (unsigned w = 1; w < workers; ++w) {
        for (const auto& [k, c] : shards[w].counts) merged.counts[k] += c;
    }
    return merged;
}

std::vector<std::vector<NgramKey>> select_topk(const NgramCountTable& table,
                                               const std::vector<int>& orders,
                                               std::size_t k_per_order,
                                               bool* truncated) {
    if (k_per_order < 1) throw std::invalid_argument("select_topk: k < 1");
    if (truncated) *truncated = false;
    std::vector<std::vector<NgramKey>> result;
    for (int n : orders) {
        std::vector<std::pair<NgramKey, uint64_t>> entries;
        for (const auto& [k, c] : table.counts) {
            if (k.order == n) entries.emplace_back(k, c);
        }
        std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        if (entries.size() < k_per_order && truncated) *truncated = true;
        const std::size_t take = std::min(k_per_order, entries.size());
        std::vector<NgramKey> keys;
        keys.reserve(take);
        for (std::size_t i = 0; i < take; ++i) keys.push_back(entries[i].first);
        result.push_back(std::move(keys));
    }
    return result;
}

}  // namespace graft
