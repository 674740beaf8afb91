#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "blf/core/error.hpp"
#include "blf/core/io.hpp"
#include "blf/core/rng.hpp"
#include "blf/tokenizer/bpe.hpp"

namespace blf {

struct DocumentRecord {
  std::string id;
  std::string subset;
  std::string text;
};

struct SplitSpec {
  std::size_t validation_size = 1000;
  std::uint64_t seed = 0;
  std::size_t per_subset_cap = 500000;
};

// Streams DocumentRecords from a JSON-lines file, one line in memory at a
// time. Blank lines are skipped. A missing id becomes "line-<n>".
class JsonlDocumentReader {
 public:
  explicit JsonlDocumentReader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw UsageError("cannot open input " + path.string());
  }

  std::optional<DocumentRecord> next() {
    std::string line;
    while (true) {
      const std::uint64_t offset = offset_;
      if (!std::getline(in_, line)) return std::nullopt;
      ++line_no_;
      offset_ += line.size() + 1;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.find_first_not_of(" \t") == std::string::npos) continue;
      return parse(line, offset);
    }
  }

  std::size_t line_number() const { return line_no_; }

 private:
  DocumentRecord parse(const std::string& line, std::uint64_t offset) const {
    auto fail = [&](const std::string& msg) {
      return FormatError(path_.string() + ":" + std::to_string(line_no_) + " (byte offset " + std::to_string(offset) +
                         "): " + msg);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw fail(std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw fail("expected a JSON object");
    auto text = j.find("text");
    if (text == j.end() || !text->is_string()) throw fail("missing string field \"text\"");
    DocumentRecord r;
    r.text = text->get<std::string>();
    if (auto id = j.find("id"); id != j.end() && !id->is_null()) {
      r.id = id->is_string() ? id->get<std::string>() : id->dump();
    } else {
      r.id = "line-" + std::to_string(line_no_);
    }
    if (auto s = j.find("subset"); s != j.end() && s->is_string()) r.subset = s->get<std::string>();
    return r;
  }

  std::filesystem::path path_;
  std::ifstream in_;
  std::size_t line_no_ = 0;
  std::uint64_t offset_ = 0;
};

// Admits at most `cap` records per subset, first come first served.
class SubsetCapper {
 public:
  explicit SubsetCapper(std::size_t cap) : cap_(cap) {}

  bool admit(const DocumentRecord& r) {
    auto& n = seen_[r.subset];
    if (n >= cap_) return false;
    ++n;
    return true;
  }

  const std::map<std::string, std::size_t>& admitted() const { return seen_; }

 private:
  std::size_t cap_;
  std::map<std::string, std::size_t> seen_;
};

struct BatchAccount {
  std::size_t documents = 0;
  std::size_t stream_tokens = 0;  // including one separator per document
  std::size_t emitted_tokens = 0;
  std::size_t dropped_tokens = 0;
  std::size_t chunks = 0;
};

// Fixed-length token sequences. Chunk i occupies tokens[i*L, (i+1)*L).
struct ChunkedDataset {
  std::size_t sequence_length = 0;
  std::vector<TokenId> tokens;
  std::vector<BatchAccount> batches;

  std::size_t size() const { return sequence_length ? tokens.size() / sequence_length : 0; }
  std::span<const TokenId> chunk(std::size_t i) const {
    return std::span<const TokenId>(tokens).subspan(i * sequence_length, sequence_length);
  }
};

// Concatenates the documents of one batch, each followed by `separator`,
// and slices the stream into length-L chunks appended to `out`. The final
// partial slice is dropped.
inline BatchAccount chunk_batch(std::span<const std::vector<TokenId>> docs, TokenId separator, std::size_t L,
                                std::vector<TokenId>& out) {
  if (L < 2) throw UsageError("sequence length must be at least 2");
  BatchAccount acc;
  acc.documents = docs.size();
  std::vector<TokenId> stream;
  for (const auto& d : docs) {
    stream.insert(stream.end(), d.begin(), d.end());
    stream.push_back(separator);
  }
  acc.stream_tokens = stream.size();
  acc.chunks = stream.size() / L;
  acc.emitted_tokens = acc.chunks * L;
  acc.dropped_tokens = acc.stream_tokens - acc.emitted_tokens;
  out.insert(out.end(), stream.begin(), stream.begin() + static_cast<std::ptrdiff_t>(acc.emitted_tokens));
  if (acc.emitted_tokens + acc.dropped_tokens != acc.stream_tokens) {
    throw Error("token conservation violated in chunk_batch");
  }
  return acc;
}

// Encodes `texts` with up to `workers` threads; output order equals input
// order regardless of the worker count.
inline std::vector<std::vector<TokenId>> encode_all(const ByteBpeModel& tok, std::span<const std::string> texts,
                                                    std::size_t workers) {
  std::vector<std::vector<TokenId>> out(texts.size());
  workers = std::max<std::size_t>(1, std::min(workers, texts.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < texts.size(); ++i) out[i] = tok.encode(texts[i]);
    return out;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < texts.size(); i += workers) out[i] = tok.encode(texts[i]);
    });
  }
  for (auto& t : pool) t.join();
  return out;
}

// Streaming concat-and-chunk: documents are buffered until a batch of
// `batch_size` is complete, then encoded and chunked.
class Chunker {
 public:
  Chunker(const ByteBpeModel& tok, std::size_t L, std::size_t batch_size, std::size_t workers = 1)
      : tok_(tok), workers_(workers) {
    if (L < 2) throw UsageError("sequence length must be at least 2");
    if (batch_size < 1) throw UsageError("batch size must be at least 1");
    data_.sequence_length = L;
    batch_size_ = batch_size;
  }

  void add(const DocumentRecord& r) {
    pending_.push_back(r.text);
    if (pending_.size() == batch_size_) flush();
  }

  ChunkedDataset finish() {
    if (!pending_.empty()) flush();
    return std::move(data_);
  }

 private:
  void flush() {
    auto encoded = encode_all(tok_, pending_, workers_);
    data_.batches.push_back(chunk_batch(encoded, tok_.special_ids().end, data_.sequence_length, data_.tokens));
    pending_.clear();
  }

  const ByteBpeModel& tok_;
  std::size_t workers_;
  std::size_t batch_size_ = 1000;
  std::vector<std::string> pending_;
  ChunkedDataset data_;
};

inline ChunkedDataset concat_and_chunk(std::span<const DocumentRecord> records, const ByteBpeModel& tok,
                                       std::size_t L = 4096, std::size_t batch_size = 1000,
                                       std::size_t workers = 1) {
  Chunker c(tok, L, batch_size, workers);
  for (const auto& r : records) c.add(r);
  return c.finish();
}

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

// Uniform sample of `validation_size` chunk indices without replacement;
// the rest form the training set. Both lists are ascending.
inline Split sample_validation(std::size_t num_chunks, const SplitSpec& spec) {
  if (spec.validation_size > num_chunks) {
    throw UsageError("validation size " + std::to_string(spec.validation_size) + " exceeds " +
                     std::to_string(num_chunks) + " chunks");
  }
  std::vector<std::size_t> idx(num_chunks);
  for (std::size_t i = 0; i < num_chunks; ++i) idx[i] = i;
  Rng rng(spec.seed, "split");
  for (std::size_t i = 0; i < spec.validation_size; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(num_chunks - i));
    std::swap(idx[i], idx[j]);
  }
  Split s;
  s.validation.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(spec.validation_size));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(spec.validation_size), idx.end());
  std::sort(s.validation.begin(), s.validation.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

// Binary chunk file: "BLFCHUNK", u32 version, u32 L, u64 count, then
// count*L little-endian int32 token ids.
inline constexpr char kChunkMagic[8] = {'B', 'L', 'F', 'C', 'H', 'U', 'N', 'K'};
inline constexpr std::uint32_t kChunkVersion = 1;

struct ChunkFile {
  std::size_t sequence_length = 0;
  std::vector<TokenId> tokens;
  std::size_t size() const { return sequence_length ? tokens.size() / sequence_length : 0; }
  std::span<const TokenId> chunk(std::size_t i) const {
    return std::span<const TokenId>(tokens).subspan(i * sequence_length, sequence_length);
  }
};

inline void write_chunk_file(const std::filesystem::path& path, std::size_t L, std::span<const TokenId> tokens) {
  if (L == 0 || tokens.size() % L != 0) throw UsageError("token count is not a multiple of the sequence length");
  std::ostringstream os(std::ios::binary);
  os.write(kChunkMagic, 8);
  io::write_le<std::uint32_t>(os, kChunkVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(L));
  io::write_le<std::uint64_t>(os, tokens.size() / L);
  io::write_le_array<TokenId>(os, tokens);
  io::write_file_atomic(path, os.str());
}

inline ChunkFile read_chunk_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open chunk file " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || !std::equal(magic, magic + 8, kChunkMagic)) {
    throw FormatError(path.string() + ": not a chunk file");
  }
  const auto version = io::read_le<std::uint32_t>(in, "chunk header");
  if (version != kChunkVersion) throw FormatError(path.string() + ": unsupported chunk file version " + std::to_string(version));
  ChunkFile f;
  f.sequence_length = io::read_le<std::uint32_t>(in, "chunk header");
  const auto count = io::read_le<std::uint64_t>(in, "chunk header");
  f.tokens.resize(static_cast<std::size_t>(count) * f.sequence_length);
  io::read_le_array<TokenId>(in, f.tokens, "chunk data in " + path.string());
  return f;
}

}  // namespace blf
