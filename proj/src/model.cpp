#include "prefixprop/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "prefixprop/config_io.hpp"
#include "prefixprop/errors.hpp"
#include "prefixprop/ops.hpp"

namespace prefixprop {

using nlohmann::json;

std::string_view to_string(TuningMode mode) {
    switch (mode) {
    case TuningMode::fine_tuning:
        return "fine_tuning";
    case TuningMode::prefix_tuning:
        return "prefix_tuning";
    case TuningMode::prefix_propagation:
        return "prefix_propagation";
    case TuningMode::propagation_kernel:
        return "propagation_kernel";
    }
    return "unknown";
}

TuningMode parse_tuning_mode(std::string_view name) {
    for (auto mode : {TuningMode::fine_tuning, TuningMode::prefix_tuning, TuningMode::prefix_propagation,
                      TuningMode::propagation_kernel}) {
        if (to_string(mode) == name) {
            return mode;
        }
    }
    throw ConfigError("unknown tuning mode '" + std::string(name) + "'");
}

bool is_prefix_mode(TuningMode mode) noexcept {
    return mode != TuningMode::fine_tuning;
}

bool uses_propagation(TuningMode mode) noexcept {
    return mode == TuningMode::prefix_propagation || mode == TuningMode::propagation_kernel;
}

void ModelConfig::validate() const {
    attention.validate();
    if (n_layers == 0 || d_ff == 0 || vocab_size <= static_cast<std::size_t>(kFirstWordToken) || max_len == 0 ||
        n_classes < 2) {
        throw ConfigError("model needs n_layers, d_ff, max_len >= 1, vocab_size > 3 and n_classes >= 2");
    }
    if (!(ln_eps > 0.0)) {
        throw ConfigError("ln_eps must be positive");
    }
    if (alpha && !(*alpha > 0.0)) {
        throw ConfigError("alpha must be positive or \"exact\"");
    }
}

void to_json(json& j, const ModelConfig& cfg) {
    j = json{{"d_model", cfg.attention.d_model},
             {"n_heads", cfg.attention.n_heads},
             {"prefix_len", cfg.attention.prefix_len},
             {"global_positions", cfg.attention.global_positions},
             {"n_layers", cfg.n_layers},
             {"d_ff", cfg.d_ff},
             {"vocab_size", cfg.vocab_size},
             {"max_len", cfg.max_len},
             {"n_classes", cfg.n_classes},
             {"ln_eps", cfg.ln_eps},
             {"qk_init_std", cfg.qk_init_std},
             {"position_init_std", cfg.position_init_std},
             {"prefix_init_std", cfg.prefix_init_std},
             {"train_head", cfg.train_head}};
    j["window"] = cfg.attention.window ? json(*cfg.attention.window) : json("full");
    j["alpha"] = cfg.alpha ? json(*cfg.alpha) : json("exact");
}

void from_json(const json& j, ModelConfig& cfg) {
    reject_unknown_fields(j, {"d_model", "n_heads", "prefix_len", "global_positions", "n_layers", "d_ff", "vocab_size",
                              "max_len", "n_classes", "ln_eps", "qk_init_std", "position_init_std", "prefix_init_std",
                              "train_head", "window", "alpha"});
    ModelConfig out;
    const auto get = [&](const char* key, auto& dst) { read_field(j, key, dst); };
    get("d_model", out.attention.d_model);
    get("n_heads", out.attention.n_heads);
    get("prefix_len", out.attention.prefix_len);
    get("global_positions", out.attention.global_positions);
    get("n_layers", out.n_layers);
    get("d_ff", out.d_ff);
    get("vocab_size", out.vocab_size);
    get("max_len", out.max_len);
    get("n_classes", out.n_classes);
    get("ln_eps", out.ln_eps);
    get("qk_init_std", out.qk_init_std);
    get("position_init_std", out.position_init_std);
    get("prefix_init_std", out.prefix_init_std);
    get("train_head", out.train_head);
    if (j.contains("window")) {
        const json& w = j.at("window");
        if (w.is_string()) {
            if (w.get<std::string>() != "full") {
                throw ConfigError("window: must be a positive integer or \"full\"");
            }
            out.attention.window.reset();
        } else {
            read_field(j, "window", out.attention.window.emplace());
        }
    }
    if (j.contains("alpha")) {
        const json& a = j.at("alpha");
        if (a.is_string()) {
            if (a.get<std::string>() != "exact") {
                throw ConfigError("alpha: must be a positive number or \"exact\"");
            }
            out.alpha.reset();
        } else {
            read_field(j, "alpha", out.alpha.emplace());
        }
    }
    cfg = std::move(out);
}

namespace {

Tensor gaussian(Shape shape, double std, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) {
        v = std * rng.normal();
    }
    return t;
}

}  // namespace

EncoderModel EncoderModel::create(const ModelConfig& cfg, TuningMode mode, std::uint64_t backbone_seed,
                                  std::uint64_t prefix_seed) {
    cfg.validate();
    EncoderModel m;
    m.cfg_ = cfg;
    m.mode_ = mode;
    m.backbone_seed_ = backbone_seed;
    m.prefix_seed_ = prefix_seed;

    const std::size_t d = cfg.attention.d_model;
    Rng backbone(backbone_seed);
    Rng embed_rng = backbone.fork("embeddings");
    m.token_embedding_ = Parameter("embed.tokens", gaussian({cfg.vocab_size, d}, 1.0, embed_rng));
    m.position_embedding_ =
        Parameter("embed.positions", gaussian({cfg.max_len, d}, cfg.position_init_std, embed_rng));
    m.embed_ln_gamma_ = Parameter("embed.ln.gamma", Tensor({d}, 1.0));
    m.embed_ln_beta_ = Parameter("embed.ln.beta", Tensor({d}));
    m.cls_embedding_ = Parameter("embed.cls", gaussian({1, d}, 1.0, embed_rng));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        Rng layer_rng = backbone.fork(l);
        m.layers_.push_back(
            LayerWeights::random(d, cfg.d_ff, layer_rng, "layers." + std::to_string(l) + ".", cfg.qk_init_std));
    }

    Rng prefix_rng(prefix_seed);
    Rng bank_rng = prefix_rng.fork("prefixes");
    Rng head_rng = prefix_rng.fork("head");
    if (mode == TuningMode::prefix_tuning) {
        m.bank_ = PrefixBank::create(PrefixMode::prefix_tuning, cfg.n_layers, cfg.attention.prefix_len, d, bank_rng,
                                     cfg.prefix_init_std);
    } else if (uses_propagation(mode)) {
        m.bank_ = PrefixBank::create(PrefixMode::propagation, cfg.n_layers, cfg.attention.prefix_len, d, bank_rng,
                                     cfg.prefix_init_std);
    }
    m.head_weight_ = Parameter("head.weight", gaussian({d, cfg.n_classes}, 0.02, head_rng));
    m.head_bias_ = Parameter("head.bias", Tensor({cfg.n_classes}));
    m.apply_trainable_flags();
    return m;
}

EncoderModel EncoderModel::with_backbone(const EncoderModel& source, const ModelConfig& cfg, TuningMode mode,
                                         std::uint64_t prefix_seed) {
    const ModelConfig& src = source.cfg_;
    if (src.attention.d_model != cfg.attention.d_model || src.attention.n_heads != cfg.attention.n_heads ||
        src.n_layers != cfg.n_layers || src.d_ff != cfg.d_ff || src.vocab_size != cfg.vocab_size ||
        src.max_len != cfg.max_len) {
        throw ConfigError("backbone dimensions differ from the target configuration");
    }
    EncoderModel m = create(cfg, mode, source.backbone_seed_, prefix_seed);
    m.token_embedding_.value = source.token_embedding_.value;
    m.position_embedding_.value = source.position_embedding_.value;
    m.embed_ln_gamma_.value = source.embed_ln_gamma_.value;
    m.embed_ln_beta_.value = source.embed_ln_beta_.value;
    m.cls_embedding_.value = source.cls_embedding_.value;
    for (std::size_t l = 0; l < m.layers_.size(); ++l) {
        const auto from = source.layers_[l].parameters();
        const auto to = m.layers_[l].parameters();
        for (std::size_t i = 0; i < to.size(); ++i) {
            to[i]->value = from[i]->value;
        }
    }
    return m;
}

void EncoderModel::apply_trainable_flags() {
    const bool full = mode_ == TuningMode::fine_tuning;
    for (Parameter* p : parameters()) {
        p->trainable = full;
    }
    cls_embedding_.trainable = true;
    if (bank_) {
        for (Parameter* p : bank_->parameters()) {
            p->trainable = true;
        }
    }
    head_weight_.trainable = cfg_.train_head;
    head_bias_.trainable = cfg_.train_head;
}

std::vector<Parameter*> EncoderModel::parameters() {
    std::vector<Parameter*> out{&token_embedding_, &position_embedding_, &embed_ln_gamma_, &embed_ln_beta_};
    for (auto& layer : layers_) {
        for (Parameter* p : layer.parameters()) {
            out.push_back(p);
        }
    }
    out.push_back(&cls_embedding_);
    if (bank_) {
        for (Parameter* p : bank_->parameters()) {
            out.push_back(p);
        }
    }
    out.push_back(&head_weight_);
    out.push_back(&head_bias_);
    return out;
}

std::vector<const Parameter*> EncoderModel::parameters() const {
    std::vector<const Parameter*> out;
    for (Parameter* p : const_cast<EncoderModel*>(this)->parameters()) {
        out.push_back(p);
    }
    return out;
}

std::vector<Parameter*> EncoderModel::trainable_parameters() {
    std::vector<Parameter*> out;
    for (Parameter* p : parameters()) {
        if (p->trainable) {
            out.push_back(p);
        }
    }
    return out;
}

Parameter* EncoderModel::find(std::string_view name) {
    for (Parameter* p : parameters()) {
        if (p->name == name) {
            return p;
        }
    }
    return nullptr;
}

void EncoderModel::zero_grad() {
    for (Parameter* p : parameters()) {
        p->zero_grad();
    }
}

ParameterPartition EncoderModel::partition() const {
    ParameterPartition part;
    for (const Parameter* p : parameters()) {
        auto& side = p->trainable ? part.trainable : part.frozen;
        side.push_back({p->name, p->count()});
        (p->trainable ? part.trainable_count : part.frozen_count) += p->count();
    }
    part.total_count = part.trainable_count + part.frozen_count;
    part.prefix_count = bank_ ? bank_->trainable_count() : 0;
    part.trainable_fraction =
        part.total_count ? static_cast<double>(part.trainable_count) / static_cast<double>(part.total_count) : 0.0;
    return part;
}

ParameterPartition partition_parameters(const EncoderModel& model) {
    return model.partition();
}

std::size_t EncoderModel::readout_position() const noexcept {
    return uses_propagation(mode_) ? cfg_.attention.prefix_len : 0;
}

void EncoderModel::check_tokens(std::span<const int> tokens) const {
    if (tokens.empty()) {
        throw LengthError("empty token sequence");
    }
    if (tokens.size() > cfg_.max_len) {
        throw LengthError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_len " +
                          std::to_string(cfg_.max_len));
    }
    if (tokens[0] != kClsToken) {
        throw InputError("sequence must start with the [CLS] token");
    }
    for (int t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab_size) {
            throw VocabularyError("token id " + std::to_string(t) + " outside vocabulary of " +
                                  std::to_string(cfg_.vocab_size));
        }
    }
}

AttentionMask EncoderModel::mask_for(std::size_t seq_len) const {
    AttentionConfig cfg = cfg_.attention;
    switch (mode_) {
    case TuningMode::fine_tuning:
        cfg.prefix_len = 0;
        return build_mask(cfg, seq_len);
    case TuningMode::prefix_tuning:
        return build_tuning_mask(cfg, seq_len);
    case TuningMode::prefix_propagation:
        return build_mask(cfg, seq_len);
    case TuningMode::propagation_kernel:
        // Sequence-key columns only; prefix keys are always visible.
        return build_mask(cfg, seq_len).select_cols(cfg.prefix_len, cfg.prefix_len + seq_len);
    }
    throw ConfigError("unknown tuning mode");
}

EncoderModel::Masks EncoderModel::masks_for(std::size_t seq_len) const {
    std::lock_guard lock(mask_cache_->mutex);
    auto it = mask_cache_->by_length.find(seq_len);
    if (it == mask_cache_->by_length.end()) {
        AttentionMask layer = mask_for(seq_len);
        const std::size_t r = readout_position();
        AttentionMask readout = layer.select_rows(r, r + 1);
        it = mask_cache_->by_length.emplace(seq_len, Masks{std::move(layer), std::move(readout)}).first;
    }
    return it->second;
}

Var EncoderModel::forward(Tape& tape, std::span<const int> tokens, const ForwardOptions& options) {
    check_tokens(tokens);
    const bool drop = options.train && options.dropout > 0.0;
    if (drop && !options.rng) {
        throw ConfigError("training-mode dropout needs a random generator");
    }
    const auto dropout_ = [&](Var x) { return drop ? dropout(x, options.dropout, true, *options.rng) : x; };

    const std::size_t n = tokens.size();
    const std::size_t j = bank_ ? bank_->prefix_len : 0;
    const std::size_t heads = cfg_.attention.n_heads;
    const double eps = cfg_.ln_eps;

    Var x = tape.bind(cls_embedding_);
    if (n > 1) {
        x = concat_rows(x, gather_rows(tape.bind(token_embedding_), tokens.subspan(1)));
    }
    x = add(x, slice_rows(tape.bind(position_embedding_), 0, n));
    x = dropout_(layer_norm(x, tape.bind(embed_ln_gamma_), tape.bind(embed_ln_beta_), eps));

    const auto [mask, readout_mask] = masks_for(n);
    const std::size_t readout = readout_position();
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        LayerWeights& w = layers_[l];
        const AttentionVars av = bind_attention(tape, w);
        const bool last = l + 1 == layers_.size();

        Var input = x;
        if (uses_propagation(mode_)) {
            input = compose_propagation_input(x, tape.bind(bank_->prefixes[l]), l + 1);
            if (drop && j > 0) {
                const std::size_t rows = input.value().rows();
                input = concat_rows(dropout_(slice_rows(input, 0, j)), slice_rows(input, j, rows));
            }
        }
        const std::size_t rows = input.value().rows();
        // The final layer only needs the readout row; rows are independent past attention.
        Var residual = last ? slice_rows(input, readout, readout + 1) : input;

        Var attn;
        switch (mode_) {
        case TuningMode::fine_tuning:
        case TuningMode::prefix_propagation:
            attn = last ? standard_attention(residual, input, input, av, readout_mask, heads)
                        : standard_attention(input, input, input, av, mask, heads);
            break;
        case TuningMode::prefix_tuning: {
            Var pk = tape.bind(bank_->keys[l]);
            Var pv = tape.bind(bank_->values[l]);
            attn = last ? prefix_tuning_attention(residual, input, pk, pv, av, readout_mask, heads)
                        : prefix_tuning_attention(input, pk, pv, av, mask, heads);
            break;
        }
        case TuningMode::propagation_kernel:
            if (j == 0) {
                // Without prefixes the decomposition is the sequence module alone.
                attn = last ? standard_attention(residual, input, input, av, readout_mask, heads)
                            : standard_attention(input, input, input, av, mask, heads);
            } else {
                Var full = kernel_decomposed_attention(slice_rows(input, 0, j), slice_rows(input, j, rows), av, &mask,
                                                       heads, cfg_.alpha);
                attn = last ? slice_rows(full, readout, readout + 1) : full;
            }
            break;
        }

        Var h = layer_norm(add(residual, dropout_(attn)), tape.bind(w.ln1_gamma), tape.bind(w.ln1_beta), eps);
        Var f = add_bias(matmul(gelu(add_bias(matmul(h, tape.bind(w.ffn_w1)), tape.bind(w.ffn_b1))),
                                tape.bind(w.ffn_w2)),
                         tape.bind(w.ffn_b2));
        x = layer_norm(add(h, dropout_(f)), tape.bind(w.ln2_gamma), tape.bind(w.ln2_beta), eps);
    }
    return add_bias(matmul(x, tape.bind(head_weight_)), tape.bind(head_bias_));
}

Tensor EncoderModel::logits(std::span<const int> tokens) const {
    Tape tape(false);
    // A non-recording tape never writes to parameters.
    auto& self = const_cast<EncoderModel&>(*this);
    const Tensor& out = self.forward(tape, tokens, {}).value();
    return Tensor({out.size()}, std::vector<double>(out.data().begin(), out.data().end()));
}

bool freeze_check(EncoderModel& model, std::span<const std::vector<int>> batch, std::span<const int> labels) {
    if (!is_prefix_mode(model.mode())) {
        throw ConfigError("freeze_check applies to prefix modes only");
    }
    if (batch.size() != labels.size() || batch.empty()) {
        throw InputError("freeze_check needs a nonempty batch with one label per sequence");
    }
    model.zero_grad();
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Tape tape;
        Var loss = cross_entropy(model.forward(tape, batch[i]), static_cast<std::size_t>(labels[i]));
        tape.backward(loss);
    }
    bool frozen_zero = true;
    bool prefix_moved = false;
    for (const Parameter* p : model.parameters()) {
        const bool is_prefix = p->name.starts_with("prefix.");
        for (double g : p->grad.data()) {
            if (!p->trainable && g != 0.0) {
                frozen_zero = false;
            }
            if (is_prefix && g != 0.0) {
                prefix_moved = true;
            }
        }
    }
    return frozen_zero && prefix_moved;
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'P', 'P', 'C', 'K', 'P', 'T', '0', '1'};

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) {
        bytes[i] = static_cast<unsigned char>(v >> (8 * i));
    }
    out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint64_t read_u64(std::istream& in) {
    unsigned char bytes[8];
    if (!in.read(reinterpret_cast<char*>(bytes), 8)) {
        throw ParseError("truncated checkpoint", 0);
    }
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    }
    return v;
}

}  // namespace

void save_checkpoint(const EncoderModel& model, const std::filesystem::path& path) {
    json header;
    header["format"] = "prefixprop-checkpoint";
    header["version"] = 1;
    header["config"] = model.config();
    header["mode"] = std::string(to_string(model.mode()));
    header["backbone_seed"] = model.backbone_seed();
    header["prefix_seed"] = model.prefix_seed();
    json tensors = json::array();
    std::uint64_t offset = 0;
    for (const Parameter* p : model.parameters()) {
        tensors.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"offset", offset}});
        offset += p->value.size() * sizeof(double);
    }
    header["tensors"] = std::move(tensors);
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write checkpoint " + path.string());
    }
    out.write(kMagic, sizeof(kMagic));
    write_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const Parameter* p : model.parameters()) {
        for (double v : p->value.data()) {
            write_u64(out, std::bit_cast<std::uint64_t>(v));
        }
    }
    if (!out) {
        throw std::runtime_error("failed writing checkpoint " + path.string());
    }
}

EncoderModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open checkpoint " + path.string());
    }
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
        throw ParseError("not a prefixprop checkpoint: " + path.string(), 0);
    }
    const std::uint64_t header_len = read_u64(in);
    std::string text(header_len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) {
        throw ParseError("truncated checkpoint header", 0);
    }
    const json header = json::parse(text);
    EncoderModel model = EncoderModel::create(header.at("config").get<ModelConfig>(),
                                              parse_tuning_mode(header.at("mode").get<std::string>()),
                                              header.at("backbone_seed").get<std::uint64_t>(),
                                              header.at("prefix_seed").get<std::uint64_t>());
    const auto data_start = in.tellg();
    std::map<std::string, const json*> table;
    for (const json& t : header.at("tensors")) {
        table[t.at("name").get<std::string>()] = &t;
    }
    for (Parameter* p : model.parameters()) {
        auto it = table.find(p->name);
        if (it == table.end()) {
            throw ParseError("checkpoint lacks tensor " + p->name, 0);
        }
        if (it->second->at("shape").get<Shape>() != p->value.shape()) {
            throw ShapeError("checkpoint tensor " + p->name + " has an unexpected shape");
        }
        in.seekg(data_start + static_cast<std::streamoff>(it->second->at("offset").get<std::uint64_t>()));
        for (auto& v : p->value.data()) {
            v = std::bit_cast<double>(read_u64(in));
        }
    }
    return model;
}

}  // namespace prefixprop
