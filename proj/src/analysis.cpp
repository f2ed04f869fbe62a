#include "deformer/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "deformer/binary_io.hpp"
#include "deformer/errors.hpp"

namespace deformer {

namespace {

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::vector<double> row(const Tensor& t, std::size_t r) {
  const auto data = t.data().subspan(r * t.cols(), t.cols());
  return {data.begin(), data.end()};
}

bool same_shape(const ModelConfig& a, const ModelConfig& b) {
  return a.n_layers == b.n_layers && a.hidden_dim == b.hidden_dim && a.n_heads == b.n_heads &&
         a.ffn_dim == b.ffn_dim && a.vocab_size == b.vocab_size && a.q_max == b.q_max && a.p_max == b.p_max &&
         a.max_positions == b.max_positions;
}

double distance(const Tensor& a, const Tensor& b, std::size_t r, DistanceMetric metric) {
  const std::size_t d = a.cols();
  if (metric == DistanceMetric::euclidean) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += (a(r, c) - b(r, c)) * (a(r, c) - b(r, c));
    return std::sqrt(s);
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    dot += a(r, c) * b(r, c);
    na += a(r, c) * a(r, c);
    nb += b(r, c) * b(r, c);
  }
  if (na == 0.0 || nb == 0.0) throw InputError("cosine distance of a zero vector");
  bool equal = true;
  for (std::size_t c = 0; c < d && equal; ++c) equal = a(r, c) == b(r, c);
  return equal ? 0.0 : std::max(0.0, 1.0 - dot / std::sqrt(na * nb));
}

void write_lines(const std::filesystem::path& path, const std::string& text) {
  binary::write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

}  // namespace

double centroid_cosine_variance(const std::vector<std::vector<double>>& vectors) {
  if (vectors.size() < 2) throw InputError("centroid variance needs at least two vectors");
  const std::size_t d = vectors.front().size();
  for (const auto& v : vectors) {
    if (v.size() != d) throw ShapeError("vectors differ in length");
    if (norm(v) == 0.0) throw InputError("zero-norm vector");
  }
  if (std::all_of(vectors.begin(), vectors.end(), [&](const auto& v) { return v == vectors.front(); })) return 0.0;
  std::vector<double> centroid(d, 0.0);
  for (const auto& v : vectors) {
    for (std::size_t i = 0; i < d; ++i) centroid[i] += v[i];
  }
  for (double& c : centroid) c /= static_cast<double>(vectors.size());
  const double cn = norm(centroid);
  if (cn == 0.0) throw InputError("zero-norm centroid");
  double total = 0.0;
  for (const auto& v : vectors) {
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) dot += v[i] * centroid[i];
    total += 1.0 - dot / (norm(v) * cn);
  }
  return total / static_cast<double>(vectors.size());
}

std::vector<double> min_max_normalize(const std::vector<double>& values) {
  if (values.empty()) return {};
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double low = *lo, span = *hi - *lo;
  std::vector<double> out(values.size(), 0.0);
  if (span > 0.0) {
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - low) / span;
  }
  return out;
}

ModelProbe full_probe(const EncoderWeights& weights) {
  return {weights.config, [&weights](std::span<const TokenId> q, std::span<const TokenId> p) {
            SegmentPair pair = pack_pair(q, p, weights.config);
            HiddenStack stack = encode_full(pair, weights);
            return EncodedPair{std::move(stack), std::move(pair)};
          }};
}

ModelProbe deformer_probe(const DeformerModel& model) {
  return {model.config(), [&model](std::span<const TokenId> q, std::span<const TokenId> p) {
            DeformerOutput out = deformer_forward(q, std::vector<TokenId>(p.begin(), p.end()), model);
            return EncodedPair{std::move(out.stack), std::move(out.pair)};
          }};
}

VarianceProfile passage_variance_profile(const ModelProbe& model, const std::vector<PassageQuestions>& probes,
                                         VarianceMode mode) {
  const std::size_t layers = model.config.n_layers + 1;
  VarianceProfile out;
  std::vector<double> sum(layers, 0.0);
  std::vector<std::size_t> counted(layers, 0);
  for (const PassageQuestions& probe : probes) {
    if (probe.questions.size() < 2) throw InputError("variance profile needs at least two questions per passage");
    std::vector<EncodedPair> encoded;
    for (const auto& q : probe.questions) encoded.push_back(model.encode(q, probe.passage));
    const std::size_t offset = encoded.front().pair.passage_offset();
    const std::size_t len = encoded.front().pair.passage_len;
    for (std::size_t l = 0; l < layers; ++l) {
      double token_sum = 0.0;
      std::size_t tokens = 0;
      auto add = [&](const std::vector<std::vector<double>>& vectors) {
        try {
          token_sum += centroid_cosine_variance(vectors);
          ++tokens;
        } catch (const InputError&) {
          ++out.skipped_tokens;
        }
      };
      if (mode == VarianceMode::token) {
        for (std::size_t t = 0; t < len; ++t) {
          std::vector<std::vector<double>> vectors;
          for (const EncodedPair& e : encoded) vectors.push_back(row(e.stack.layer(l), offset + t));
          add(vectors);
        }
      } else {
        std::vector<std::vector<double>> pooled;
        for (const EncodedPair& e : encoded) {
          const Tensor& x = e.stack.layer(l);
          std::vector<double> mean(x.cols(), 0.0);
          for (std::size_t t = 0; t < len; ++t) {
            for (std::size_t c = 0; c < x.cols(); ++c) mean[c] += x(offset + t, c) / static_cast<double>(len);
          }
          pooled.push_back(std::move(mean));
        }
        add(pooled);
      }
      if (tokens > 0) {
        sum[l] += token_sum / static_cast<double>(tokens);
        ++counted[l];
      }
    }
    ++out.passages;
    out.questions += probe.questions.size();
  }
  out.raw.resize(layers, 0.0);
  for (std::size_t l = 0; l < layers; ++l) {
    if (counted[l] > 0) out.raw[l] = sum[l] / static_cast<double>(counted[l]);
  }
  out.normalized = min_max_normalize(out.raw);
  return out;
}

DivergenceProfile divergence_profile(const ModelProbe& a, const ModelProbe& b, const std::vector<QaPairRef>& sample,
                                     DistanceMetric metric) {
  if (!same_shape(a.config, b.config)) throw ConfigurationError("models differ in shape");
  const std::size_t layers = a.config.n_layers + 1;
  std::vector<double> q_sum(layers, 0.0), p_sum(layers, 0.0);
  std::size_t q_rows = 0, p_rows = 0;
  for (const QaPairRef& s : sample) {
    const EncodedPair ea = a.encode(s.question, s.passage), eb = b.encode(s.question, s.passage);
    const SegmentPair& pair = ea.pair;
    for (std::size_t l = 0; l < layers; ++l) {
      const Tensor& xa = ea.stack.layer(l);
      const Tensor& xb = eb.stack.layer(l);
      if (!xa.same_shape(xb)) throw ShapeError("layer " + std::to_string(l) + " shapes differ between models");
      for (std::size_t r = 0; r < pair.length(); ++r) {
        if (!pair.valid[r]) continue;
        const double dist = distance(xa, xb, r, metric);
        (r < pair.question_block_len ? q_sum : p_sum)[l] += dist;
      }
    }
    for (std::size_t r = 0; r < pair.length(); ++r) {
      if (pair.valid[r]) ++(r < pair.question_block_len ? q_rows : p_rows);
    }
  }
  DivergenceProfile out;
  for (std::size_t l = 0; l < layers; ++l) {
    out.question.push_back(q_rows ? q_sum[l] / static_cast<double>(q_rows) : 0.0);
    out.passage.push_back(p_rows ? p_sum[l] / static_cast<double>(p_rows) : 0.0);
  }
  return out;
}

void write_variance_profile(const std::filesystem::path& path, const VarianceProfile& profile) {
  std::string text;
  for (std::size_t l = 0; l < profile.raw.size(); ++l) {
    nlohmann::ordered_json j;
    j["layer"] = l;
    j["raw"] = profile.raw[l];
    j["normalized"] = profile.normalized[l];
    text += j.dump() + "\n";
  }
  write_lines(path, text);
}

void write_divergence_profile(const std::filesystem::path& path, const DivergenceProfile& profile) {
  std::string text;
  for (std::size_t l = 0; l < profile.question.size(); ++l) {
    nlohmann::ordered_json j;
    j["layer"] = l;
    j["question"] = profile.question[l];
    j["passage"] = profile.passage[l];
    text += j.dump() + "\n";
  }
  write_lines(path, text);
}

std::string sparkline(const std::vector<double>& values) {
  static const char* const kBlocks[] = {"▁", "▂", "▃", "▄", "▅", "▆", "▇", "█"};
  std::string out;
  for (double v : min_max_normalize(values)) out += kBlocks[std::min<std::size_t>(7, static_cast<std::size_t>(v * 8.0))];
  return out;
}

}  // namespace deformer
