#ifndef INSTAB_CORPUS_HPP
#define INSTAB_CORPUS_HPP

// Synthetic clean-corpus generation and uniform random noise injection
// (insert / overwrite modes over a restricted noise vocabulary).

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "instab/common.hpp"

namespace instab {

struct VocabSpec {
    std::uint32_t size = 512;
    // Trailing token ids guaranteed absent from any clean corpus.
    std::uint32_t reserved_zero_freq = 16;

    std::uint32_t num_nonreserved() const { return size - reserved_zero_freq; }

    void validate() const {
        if (size < 16) throw ConfigError("VocabSpec: size must be >= 16");
        if (reserved_zero_freq >= size)
            throw ConfigError("VocabSpec: reserved_zero_freq must be < size");
    }
};

struct CorpusSpec {
    VocabSpec vocab;
    std::uint64_t num_documents = 6000;
    std::uint32_t doc_length_min = 32;
    std::uint32_t doc_length_max = 96;
    double zipf_exponent = 1.0;
    int markov_order = 1;  // 0 = i.i.d., 1 = block-structured bigrams
    std::uint64_t seed = 1;

    void validate() const {
        vocab.validate();
        if (num_documents == 0) throw ConfigError("CorpusSpec: num_documents must be positive");
        if (doc_length_min < 2) throw ConfigError("CorpusSpec: doc_length_min must be >= 2");
        if (doc_length_max < doc_length_min)
            throw ConfigError("CorpusSpec: doc_length_max must be >= doc_length_min");
        if (zipf_exponent < 0.0) throw ConfigError("CorpusSpec: zipf_exponent must be >= 0");
        if (markov_order != 0 && markov_order != 1)
            throw ConfigError("CorpusSpec: markov_order must be 0 or 1");
    }
};

struct MaskedTokenSequence {
    std::vector<std::uint32_t> tokens;
    std::vector<std::uint8_t> noise_mask;  // 1 = injected noise

    std::size_t size() const { return tokens.size(); }

    bool is_clean() const {
        return std::all_of(noise_mask.begin(), noise_mask.end(),
                           [](std::uint8_t m) { return m == 0; });
    }
};

using Corpus = std::vector<MaskedTokenSequence>;

enum class NoiseMode { Insert, Overwrite };

inline const char* to_string(NoiseMode m) {
    return m == NoiseMode::Insert ? "insert" : "overwrite";
}

struct NoiseSpec {
    NoiseMode mode = NoiseMode::Insert;
    double alpha = 0.0;                     // target noise ratio in [0, 1)
    std::vector<std::uint32_t> noise_vocab; // V_N, sorted unique token ids
    std::uint64_t seed = 2;

    void validate(std::uint32_t vocab_size) const {
        if (!(alpha >= 0.0 && alpha < 1.0))
            throw ConfigError("NoiseSpec: alpha must be in [0, 1)");
        if (alpha > 0.0 && noise_vocab.empty())
            throw ConfigError("NoiseSpec: noise_vocab must be nonempty");
        for (std::uint32_t t : noise_vocab)
            if (t >= vocab_size)
                throw ConfigError("NoiseSpec: noise_vocab token " + std::to_string(t) +
                                  " outside vocabulary");
    }
};

// ---------------------------------------------------------------------------
// Clean corpus generation
// ---------------------------------------------------------------------------

// Zipf marginal over the non-reserved ids: weight(i) = (i+1)^-s.
class ZipfTable {
public:
    ZipfTable(std::uint32_t num_tokens, double exponent) : cum_(num_tokens) {
        double acc = 0.0;
        for (std::uint32_t i = 0; i < num_tokens; ++i) {
            acc += std::pow(static_cast<double>(i) + 1.0, -exponent);
            cum_[i] = acc;
        }
    }

    std::uint32_t sample(Rng& rng) const { return sample_range(rng, 0, static_cast<std::uint32_t>(cum_.size())); }

    // Sample restricted to ids [lo, hi), reweighted by the same marginal.
    std::uint32_t sample_range(Rng& rng, std::uint32_t lo, std::uint32_t hi) const {
        double base = lo == 0 ? 0.0 : cum_[lo - 1];
        double target = base + rng.next_double() * (cum_[hi - 1] - base);
        auto it = std::upper_bound(cum_.begin() + lo, cum_.begin() + hi, target);
        if (it == cum_.begin() + hi) --it;
        return static_cast<std::uint32_t>(it - cum_.begin());
    }

private:
    std::vector<double> cum_;
};

// Order-1 structure: the non-reserved ids are split into equal-size blocks and
// each block maps to a successor block through a seeded permutation. With
// probability kMarkovMix the next token is drawn from the successor block
// (Zipf-reweighted within it), otherwise from the full marginal. The
// conditional distribution depends on the current token only through its
// block, so the bigram table has rank num_blocks and stays learnable by
// narrow models; with zipf_exponent 0 the construction preserves the uniform
// marginal exactly.
class MarkovKernel {
public:
    static constexpr double kMarkovMix = 0.9;

    MarkovKernel(const CorpusSpec& spec, const ZipfTable& zipf)
        : zipf_(zipf), num_tokens_(spec.vocab.num_nonreserved()) {
        num_blocks_ = num_tokens_ >= 64 ? 16 : std::max<std::uint32_t>(2, num_tokens_ / 4);
        block_size_ = num_tokens_ / num_blocks_;
        successor_.resize(num_blocks_);
        std::iota(successor_.begin(), successor_.end(), 0u);
        Rng rng(mix_seed(spec.seed, "markov-structure"));
        for (std::uint32_t i = num_blocks_ - 1; i > 0; --i) {
            auto j = static_cast<std::uint32_t>(rng.next_below(i + 1));
            std::swap(successor_[i], successor_[j]);
        }
    }

    std::uint32_t sample_next(std::uint32_t current, Rng& rng) const {
        if (rng.next_double() < kMarkovMix) {
            std::uint32_t block = std::min(current / block_size_, num_blocks_ - 1);
            std::uint32_t succ = successor_[block];
            std::uint32_t lo = succ * block_size_;
            std::uint32_t hi = succ + 1 == num_blocks_ ? num_tokens_ : lo + block_size_;
            return zipf_.sample_range(rng, lo, hi);
        }
        return zipf_.sample(rng);
    }

private:
    const ZipfTable& zipf_;
    std::uint32_t num_tokens_;
    std::uint32_t num_blocks_;
    std::uint32_t block_size_;
    std::vector<std::uint32_t> successor_;
};

inline Corpus generate_clean_corpus(const CorpusSpec& spec) {
    spec.validate();
    ZipfTable zipf(spec.vocab.num_nonreserved(), spec.zipf_exponent);
    MarkovKernel kernel(spec, zipf);

    Corpus corpus(spec.num_documents);
    for (std::uint64_t d = 0; d < spec.num_documents; ++d) {
        Rng rng(mix_seed(spec.seed, d));
        std::uint32_t span = spec.doc_length_max - spec.doc_length_min + 1;
        auto len = spec.doc_length_min + static_cast<std::uint32_t>(rng.next_below(span));
        auto& doc = corpus[d];
        doc.tokens.resize(len);
        doc.noise_mask.assign(len, 0);
        doc.tokens[0] = zipf.sample(rng);
        for (std::uint32_t i = 1; i < len; ++i) {
            doc.tokens[i] = spec.markov_order == 1 ? kernel.sample_next(doc.tokens[i - 1], rng)
                                                   : zipf.sample(rng);
        }
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// Frequency statistics and noise-vocabulary selection
// ---------------------------------------------------------------------------

inline std::uint64_t token_frequency(const Corpus& corpus, std::uint32_t token) {
    std::uint64_t count = 0;
    for (const auto& doc : corpus)
        for (std::uint32_t t : doc.tokens)
            if (t == token) ++count;
    return count;
}

inline std::vector<std::uint64_t> frequency_table(const Corpus& corpus, const VocabSpec& vocab) {
    std::vector<std::uint64_t> freq(vocab.size, 0);
    for (const auto& doc : corpus)
        for (std::uint32_t t : doc.tokens) {
            if (t >= vocab.size) throw DataError("frequency_table: token outside vocabulary");
            ++freq[t];
        }
    return freq;
}

inline std::vector<std::uint32_t> select_noise_vocab_first_k(const VocabSpec& vocab,
                                                             std::uint32_t k) {
    if (k == 0 || k > vocab.size)
        throw ConfigError("select_noise_vocab_first_k: k must be in [1, vocab size]");
    std::vector<std::uint32_t> out(k);
    std::iota(out.begin(), out.end(), 0u);
    return out;
}

// Greedy closest-first on |frequency - target|, ties broken by ascending id.
inline std::vector<std::uint32_t> select_noise_vocab_by_frequency(
    const std::vector<std::uint64_t>& freqs, std::uint32_t k, double target_mean_freq) {
    if (k == 0 || static_cast<std::size_t>(k) > freqs.size())
        throw ConfigError("select_noise_vocab_by_frequency: k exceeds vocabulary size");
    std::vector<std::uint32_t> ids(freqs.size());
    std::iota(ids.begin(), ids.end(), 0u);
    std::stable_sort(ids.begin(), ids.end(), [&](std::uint32_t a, std::uint32_t b) {
        double da = std::abs(static_cast<double>(freqs[a]) - target_mean_freq);
        double db = std::abs(static_cast<double>(freqs[b]) - target_mean_freq);
        if (da != db) return da < db;
        return a < b;
    });
    std::vector<std::uint32_t> out(ids.begin(), ids.begin() + k);
    std::sort(out.begin(), out.end());
    return out;
}

// ---------------------------------------------------------------------------
// Noise injection
// ---------------------------------------------------------------------------

// Inserts round(n*alpha/(1-alpha)) noise tokens into the n gaps following each
// clean token. Gap indices are drawn with replacement; several insertions in
// one gap keep their draw order.
inline MaskedTokenSequence inject_insert(const MaskedTokenSequence& doc, const NoiseSpec& noise) {
    if (noise.mode != NoiseMode::Insert) throw ConfigError("inject_insert: mode is not Insert");
    if (!doc.is_clean()) throw DataError("inject_insert: input document already carries noise");
    if (!(noise.alpha >= 0.0 && noise.alpha < 1.0))
        throw ConfigError("inject_insert: alpha must be in [0, 1)");

    const std::size_t n = doc.size();
    const auto m = static_cast<std::size_t>(
        std::llround(static_cast<double>(n) * noise.alpha / (1.0 - noise.alpha)));
    if (m == 0) return doc;
    if (noise.noise_vocab.empty()) throw ConfigError("inject_insert: empty noise vocabulary");

    Rng rng(noise.seed);
    std::vector<std::vector<std::uint32_t>> gaps(n);
    for (std::size_t i = 0; i < m; ++i) {
        auto gap = static_cast<std::size_t>(rng.next_below(n));
        auto tok = noise.noise_vocab[rng.next_below(noise.noise_vocab.size())];
        gaps[gap].push_back(tok);
    }

    MaskedTokenSequence out;
    out.tokens.reserve(n + m);
    out.noise_mask.reserve(n + m);
    for (std::size_t i = 0; i < n; ++i) {
        out.tokens.push_back(doc.tokens[i]);
        out.noise_mask.push_back(0);
        for (std::uint32_t tok : gaps[i]) {
            out.tokens.push_back(tok);
            out.noise_mask.push_back(1);
        }
    }
    return out;
}

// Replaces each token independently with probability alpha.
inline MaskedTokenSequence inject_overwrite(const MaskedTokenSequence& doc,
                                            const NoiseSpec& noise) {
    if (noise.mode != NoiseMode::Overwrite)
        throw ConfigError("inject_overwrite: mode is not Overwrite");
    if (!doc.is_clean()) throw DataError("inject_overwrite: input document already carries noise");
    if (!(noise.alpha >= 0.0 && noise.alpha < 1.0))
        throw ConfigError("inject_overwrite: alpha must be in [0, 1)");
    if (noise.alpha > 0.0 && noise.noise_vocab.empty())
        throw ConfigError("inject_overwrite: empty noise vocabulary");

    MaskedTokenSequence out = doc;
    Rng rng(noise.seed);
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (rng.next_double() < noise.alpha) {
            out.tokens[i] = noise.noise_vocab[rng.next_below(noise.noise_vocab.size())];
            out.noise_mask[i] = 1;
        }
    }
    return out;
}

// Whole-corpus injection with per-document seed streams, so documents can be
// processed in any order or in parallel without changing the result.
inline Corpus inject_corpus(const Corpus& clean, const NoiseSpec& noise) {
    Corpus out(clean.size());
    for (std::size_t d = 0; d < clean.size(); ++d) {
        NoiseSpec doc_noise = noise;
        doc_noise.seed = mix_seed(noise.seed, d);
        out[d] = noise.alpha == 0.0
                     ? clean[d]
                     : (noise.mode == NoiseMode::Insert ? inject_insert(clean[d], doc_noise)
                                                        : inject_overwrite(clean[d], doc_noise));
    }
    return out;
}

inline std::uint64_t total_tokens(const Corpus& corpus) {
    std::uint64_t n = 0;
    for (const auto& doc : corpus) n += doc.size();
    return n;
}

inline double realized_noise_fraction(const Corpus& corpus) {
    std::uint64_t noisy = 0, total = 0;
    for (const auto& doc : corpus) {
        total += doc.size();
        for (std::uint8_t m : doc.noise_mask) noisy += m;
    }
    return total == 0 ? 0.0 : static_cast<double>(noisy) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Corpus file format: "NLAB", u32 version, u64 doc count, then per document a
// u32 length, the u32 token ids, and a byte-padded noise bitmask (LSB first).
// Little-endian throughout.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const char* p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(p[i]);
    return v;
}

inline std::uint64_t get_u64(const char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(p[i]);
    return v;
}

}  // namespace detail

inline constexpr char kCorpusMagic[4] = {'N', 'L', 'A', 'B'};
inline constexpr std::uint32_t kCorpusVersion = 1;

inline void write_corpus_file(const std::string& path, const Corpus& corpus) {
    std::string buf;
    buf.append(kCorpusMagic, 4);
    detail::put_u32(buf, kCorpusVersion);
    detail::put_u64(buf, corpus.size());
    for (const auto& doc : corpus) {
        detail::put_u32(buf, static_cast<std::uint32_t>(doc.size()));
        for (std::uint32_t t : doc.tokens) detail::put_u32(buf, t);
        std::size_t nbytes = (doc.size() + 7) / 8;
        std::size_t start = buf.size();
        buf.append(nbytes, '\0');
        for (std::size_t i = 0; i < doc.size(); ++i)
            if (doc.noise_mask[i]) buf[start + i / 8] |= static_cast<char>(1u << (i % 8));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("write_corpus_file: cannot open " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw DataError("write_corpus_file: write failed for " + path);
}

inline Corpus read_corpus_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("read_corpus_file: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 16 || std::memcmp(buf.data(), kCorpusMagic, 4) != 0)
        throw DataError("read_corpus_file: bad magic in " + path);
    if (detail::get_u32(buf.data() + 4) != kCorpusVersion)
        throw DataError("read_corpus_file: unsupported version in " + path);
    std::uint64_t ndocs = detail::get_u64(buf.data() + 8);
    std::size_t off = 16;
    Corpus corpus(ndocs);
    for (std::uint64_t d = 0; d < ndocs; ++d) {
        if (off + 4 > buf.size()) throw DataError("read_corpus_file: truncated document header");
        std::uint32_t len = detail::get_u32(buf.data() + off);
        off += 4;
        std::size_t mask_bytes = (len + 7) / 8;
        if (off + 4ull * len + mask_bytes > buf.size())
            throw DataError("read_corpus_file: truncated document body");
        auto& doc = corpus[d];
        doc.tokens.resize(len);
        doc.noise_mask.resize(len);
        for (std::uint32_t i = 0; i < len; ++i) {
            doc.tokens[i] = detail::get_u32(buf.data() + off);
            off += 4;
        }
        for (std::uint32_t i = 0; i < len; ++i)
            doc.noise_mask[i] =
                (static_cast<unsigned char>(buf[off + i / 8]) >> (i % 8)) & 1u;
        off += mask_bytes;
    }
    return corpus;
}

}  // namespace instab

#endif  // INSTAB_CORPUS_HPP
