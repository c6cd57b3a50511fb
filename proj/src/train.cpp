#include "capskit/train.hpp"

#include <zlib.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "capskit/rng.hpp"

namespace capskit {

namespace {

// Fixed chunk count: the gradient/metric reduction order never depends on the
// worker count, so parallel runs are bit-identical to serial ones.
constexpr int kReduceChunks = 8;

std::vector<Tensor*> tensor_list(CapsNetParams& p) {
    std::vector<Tensor*> v;
    p.for_each_tensor([&](Tensor& t) { v.push_back(&t); });
    return v;
}

std::vector<const Tensor*> tensor_list(const CapsNetParams& p) {
    std::vector<const Tensor*> v;
    p.for_each_tensor([&](const Tensor& t) { v.push_back(&t); });
    return v;
}

void add_into(CapsNetParams& dst, const CapsNetParams& src) {
    auto d = tensor_list(dst);
    auto s = tensor_list(src);
    for (std::size_t k = 0; k < d.size(); ++k) {
        for (std::size_t i = 0; i < d[k]->data.size(); ++i) d[k]->data[i] += s[k]->data[i];
    }
}

std::uint64_t epoch_seed(std::uint64_t seed, int fold, int epoch) {
    return mix_seed(mix_seed(seed, static_cast<std::uint64_t>(fold) + 1),
                    static_cast<std::uint64_t>(epoch) + 1);
}

double fmt_tol(double a, double b) { return std::fabs(a - b); }

}  // namespace

void TrainConfig::validate() const {
    if (opt.lr <= 0 || opt.beta1 <= 0 || opt.beta2 <= 0 || opt.epsilon <= 0) {
        throw std::invalid_argument("config: optimizer hyperparameters must be positive");
    }
    if (opt.beta1 >= 1 || opt.beta2 >= 1) {
        throw std::invalid_argument("config: beta1/beta2 must be in (0,1)");
    }
    if (batch_size < 1) throw std::invalid_argument("config: batch size must be positive");
    if (epochs < 0) throw std::invalid_argument("config: epochs must be >= 0");
    if (folds != 0 && folds < 2) {
        throw std::invalid_argument("config: folds must be 0 (plain split) or >= 2");
    }
    if (workers < 1) throw std::invalid_argument("config: workers must be >= 1");
    if (routing.method == RoutingSpec::Method::Dynamic && routing.iterations < 1) {
        throw std::invalid_argument("config: routing iterations must be >= 1");
    }
    if (squash.variant == SquashVariant::NormM && squash.m < 1) {
        throw std::invalid_argument("config: squash m must be >= 1");
    }
}

std::string TrainConfig::to_json() const {
    nlohmann::json j;
    j["squash"] = squash.name();
    j["routing"] = {{"method", routing.method_name()}, {"iterations", routing.iterations}};
    j["optimizer"] = {{"lr", opt.lr},
                      {"beta1", opt.beta1},
                      {"beta2", opt.beta2},
                      {"epsilon", opt.epsilon}};
    j["batch_size"] = batch_size;
    j["epochs"] = epochs;
    j["folds"] = folds;
    j["seed"] = seed;
    j["preset"] = preset;
    j["dataset"] = dataset;
    j["workers"] = workers;
    j["limit"] = limit;
    return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    TrainConfig c;
    auto sq = SquashSpec::parse(j.at("squash").get<std::string>());
    if (!sq) throw std::invalid_argument("config: bad squash name in JSON");
    c.squash = *sq;
    const std::string method = j.at("routing").at("method").get<std::string>();
    const int iters = j.at("routing").at("iterations").get<int>();
    c.routing = method == "self" ? RoutingSpec::self_routing(c.squash)
                                 : RoutingSpec::dynamic(iters, c.squash);
    c.opt.lr = j.at("optimizer").at("lr").get<double>();
    c.opt.beta1 = j.at("optimizer").at("beta1").get<double>();
    c.opt.beta2 = j.at("optimizer").at("beta2").get<double>();
    c.opt.epsilon = j.at("optimizer").at("epsilon").get<double>();
    c.batch_size = j.at("batch_size").get<std::int64_t>();
    c.epochs = j.at("epochs").get<int>();
    c.folds = j.at("folds").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.preset = j.at("preset").get<std::string>();
    c.dataset = j.at("dataset").get<std::string>();
    c.workers = j.at("workers").get<int>();
    c.limit = j.at("limit").get<std::int64_t>();
    return c;
}

bool EpochRecord::equals_ignoring_seconds(const EpochRecord& o, double tol) const {
    return fold == o.fold && epoch == o.epoch && fmt_tol(train_acc, o.train_acc) <= tol &&
           fmt_tol(val_acc, o.val_acc) <= tol && fmt_tol(test_acc, o.test_acc) <= tol &&
           fmt_tol(train_loss, o.train_loss) <= tol && fmt_tol(test_loss, o.test_loss) <= tol;
}

AdamState AdamState::zeros_like(const CapsNetParams& p) {
    return {CapsNetParams::zeros_like(p), CapsNetParams::zeros_like(p), 0};
}

void adam_step(CapsNetParams& params, const CapsNetParams& grads, AdamState& state,
               const OptimizerConfig& opt) {
    state.t += 1;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
    auto p = tensor_list(params);
    auto g = tensor_list(grads);
    auto m = tensor_list(state.m);
    auto v = tensor_list(state.v);
    for (std::size_t k = 0; k < p.size(); ++k) {
        double* pd = p[k]->data.data();
        const double* gd = g[k]->data.data();
        double* md = m[k]->data.data();
        double* vd = v[k]->data.data();
        const std::size_t n = p[k]->data.size();
        for (std::size_t i = 0; i < n; ++i) {
            md[i] = opt.beta1 * md[i] + (1.0 - opt.beta1) * gd[i];
            vd[i] = opt.beta2 * vd[i] + (1.0 - opt.beta2) * gd[i] * gd[i];
            const double mhat = md[i] / bc1;
            const double vhat = vd[i] / bc2;
            pd[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.epsilon);
        }
    }
}

namespace {

struct ChunkRange {
    std::int64_t begin, end;
};

ChunkRange chunk_range(std::int64_t n, int chunk) {
    return {n * chunk / kReduceChunks, n * (chunk + 1) / kReduceChunks};
}

template <typename PerChunk>
void run_chunks(std::int64_t n, int workers, PerChunk&& per_chunk) {
    if (n == 0) return;
    const int nthreads = std::min(workers, kReduceChunks);
    if (nthreads <= 1) {
        for (int c = 0; c < kReduceChunks; ++c) per_chunk(c);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(nthreads));
    for (int t = 0; t < nthreads; ++t) {
        pool.emplace_back([&]() {
            for (int c = next.fetch_add(1); c < kReduceChunks; c = next.fetch_add(1)) {
                per_chunk(c);
            }
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace

BatchStats accumulate_batch_gradients(const CapsNetParams& params, const ArchConfig& arch,
                                      const RoutingSpec& routing, const Dataset& data,
                                      const std::int64_t* idx, std::int64_t count, int workers,
                                      CapsNetParams& grad_out) {
    std::vector<CapsNetParams> chunk_grads(kReduceChunks);
    std::vector<BatchStats> chunk_stats(kReduceChunks);

    run_chunks(count, workers, [&](int c) {
        const ChunkRange r = chunk_range(count, c);
        if (r.begin >= r.end) return;
        CapsNetParams local = CapsNetParams::zeros_like(params);
        BatchStats st;
        ForwardTrace trace;
        for (std::int64_t k = r.begin; k < r.end; ++k) {
            const std::int64_t sample = idx[k];
            const Tensor img = data.image(sample);
            const int label = data.labels[static_cast<std::size_t>(sample)];
            const ForwardResult out = forward(img, params, arch, routing, &trace);
            const double loss = margin_loss(out.class_scores, label);
            st.loss_sum += loss;
            if (!std::isfinite(loss)) st.finite = false;
            if (out.prediction == label) st.correct += 1;
            CapsNetParams g = backward(trace, params, arch, routing, label);
            add_into(local, g);
        }
        chunk_grads[static_cast<std::size_t>(c)] = std::move(local);
        chunk_stats[static_cast<std::size_t>(c)] = st;
    });

    BatchStats total;
    for (int c = 0; c < kReduceChunks; ++c) {
        const ChunkRange r = chunk_range(count, c);
        if (r.begin >= r.end) continue;
        add_into(grad_out, chunk_grads[static_cast<std::size_t>(c)]);
        total.loss_sum += chunk_stats[static_cast<std::size_t>(c)].loss_sum;
        total.correct += chunk_stats[static_cast<std::size_t>(c)].correct;
        total.finite = total.finite && chunk_stats[static_cast<std::size_t>(c)].finite;
    }
    return total;
}

std::pair<double, double> evaluate(const CapsNetParams& params, const ArchConfig& arch,
                                   const Dataset& data, const RoutingSpec& routing, int workers,
                                   const std::vector<std::int64_t>* indices) {
    const std::int64_t n = indices ? static_cast<std::int64_t>(indices->size()) : data.n();
    if (n == 0) throw std::invalid_argument("evaluate: empty dataset");

    std::vector<double> chunk_loss(kReduceChunks, 0.0);
    std::vector<std::int64_t> chunk_correct(kReduceChunks, 0);

    run_chunks(n, workers, [&](int c) {
        const ChunkRange r = chunk_range(n, c);
        double loss_sum = 0.0;
        std::int64_t correct = 0;
        for (std::int64_t k = r.begin; k < r.end; ++k) {
            const std::int64_t sample = indices ? (*indices)[static_cast<std::size_t>(k)] : k;
            const Tensor img = data.image(sample);
            const int label = data.labels[static_cast<std::size_t>(sample)];
            const ForwardResult out = forward(img, params, arch, routing);
            loss_sum += margin_loss(out.class_scores, label);
            if (out.prediction == label) correct += 1;
        }
        chunk_loss[static_cast<std::size_t>(c)] = loss_sum;
        chunk_correct[static_cast<std::size_t>(c)] = correct;
    });

    double loss_sum = 0.0;
    std::int64_t correct = 0;
    for (int c = 0; c < kReduceChunks; ++c) {
        loss_sum += chunk_loss[static_cast<std::size_t>(c)];
        correct += chunk_correct[static_cast<std::size_t>(c)];
    }
    return {static_cast<double>(correct) / static_cast<double>(n),
            loss_sum / static_cast<double>(n)};
}

const char* MetricsWriter::header() {
    return "fold,epoch,train_acc,val_acc,test_acc,train_loss,test_loss,seconds";
}

MetricsWriter::MetricsWriter(const std::string& path, bool append) : path_(path) {
    const bool fresh = [&] {
        if (!append) return true;
        std::ifstream probe(path);
        return !probe.good() || probe.peek() == std::ifstream::traits_type::eof();
    }();
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot open metrics file: " + path);
    if (fresh) out_ << header() << "\n";
    out_.flush();
}

void MetricsWriter::write(const EpochRecord& r) {
    char buf[320];
    std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.3f", r.fold, r.epoch,
                  r.train_acc, r.val_acc, r.test_acc, r.train_loss, r.test_loss, r.seconds);
    out_ << buf << "\n";
    out_.flush();
}

std::vector<EpochRecord> parse_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open metrics file: " + path);
    std::string line;
    if (!std::getline(in, line)) return {};
    if (line != MetricsWriter::header()) {
        throw FormatError("metrics file header mismatch: " + line);
    }
    std::vector<EpochRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        EpochRecord r;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream is(line);
        if (!(is >> r.fold >> r.epoch >> r.train_acc >> r.val_acc >> r.test_acc >> r.train_loss >>
              r.test_loss >> r.seconds)) {
            throw FormatError("metrics row unparsable: " + line);
        }
        out.push_back(r);
    }
    return out;
}

namespace {

constexpr char kCheckpointMagic[8] = {'C', 'A', 'P', 'S', 'K', 'P', 'T', '\n'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& s, std::uint32_t v) { s.append(reinterpret_cast<char*>(&v), 4); }
void put_u64(std::string& s, std::uint64_t v) { s.append(reinterpret_cast<char*>(&v), 8); }
void put_i64(std::string& s, std::int64_t v) { s.append(reinterpret_cast<char*>(&v), 8); }

void put_tensor(std::string& s, const Tensor& t) {
    put_u32(s, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape) put_i64(s, d);
    s.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
}

void put_params(std::string& s, const CapsNetParams& p) {
    std::uint32_t count = 0;
    p.for_each_tensor([&](const Tensor&) { ++count; });
    put_u32(s, count);
    p.for_each_tensor([&](const Tensor& t) { put_tensor(s, t); });
}

class Reader {
public:
    Reader(const std::uint8_t* data, std::size_t size) : p_(data), end_(data + size) {}

    std::uint32_t u32() { return get<std::uint32_t>(); }
    std::uint64_t u64() { return get<std::uint64_t>(); }
    std::int64_t i64() { return get<std::int64_t>(); }

    Tensor tensor() {
        const std::uint32_t rank = u32();
        std::vector<std::int64_t> shape(rank);
        for (auto& d : shape) d = i64();
        const std::int64_t n = shape_product(shape);
        need(static_cast<std::size_t>(n) * sizeof(double));
        std::vector<double> data(static_cast<std::size_t>(n));
        std::memcpy(data.data(), p_, data.size() * sizeof(double));
        p_ += data.size() * sizeof(double);
        return Tensor(std::move(shape), std::move(data));
    }

    CapsNetParams params(bool with_route_hint) {
        const std::uint32_t count = u32();
        CapsNetParams p;
        p.conv1_kernels = tensor();
        p.conv1_bias = tensor();
        p.primary_kernels = tensor();
        p.primary_bias = tensor();
        p.W = tensor();
        if (count == 6) p.w_route = tensor();
        (void)with_route_hint;
        return p;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(p_), n);
        p_ += n;
        return s;
    }

private:
    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, p_, sizeof(T));
        p_ += sizeof(T);
        return v;
    }

    void need(std::size_t n) {
        if (static_cast<std::size_t>(end_ - p_) < n) {
            throw FormatError("checkpoint corrupted: truncated payload");
        }
    }

    const std::uint8_t* p_;
    const std::uint8_t* end_;
};

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::string payload;
    const std::string config_json = ck.config.to_json();
    put_u64(payload, config_json.size());
    payload += config_json;
    put_i64(payload, ck.fold_id);
    put_i64(payload, ck.epochs_done);
    put_i64(payload, ck.moments.t);
    put_u64(payload, ck.seed_state);
    put_params(payload, ck.params);
    put_params(payload, ck.moments.m);
    put_params(payload, ck.moments.v);

    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(payload.data()),
              static_cast<uInt>(payload.size())));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    std::uint32_t ver = kCheckpointVersion;
    out.write(reinterpret_cast<char*>(&ver), 4);
    std::uint64_t len = payload.size();
    out.write(reinterpret_cast<char*>(&len), 8);
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    out.write(reinterpret_cast<const char*>(&crc), 4);
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
    if (buf.size() < sizeof(kCheckpointMagic) + 12 ||
        std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
        throw FormatError("not a capskit checkpoint: " + path);
    }
    std::uint32_t ver;
    std::memcpy(&ver, buf.data() + 8, 4);
    if (ver != kCheckpointVersion) {
        throw FormatError("checkpoint version " + std::to_string(ver) +
                          " unsupported; expected " + std::to_string(kCheckpointVersion) +
                          " (re-train or convert)");
    }
    std::uint64_t len;
    std::memcpy(&len, buf.data() + 12, 8);
    if (buf.size() != 20 + len + 4) {
        throw FormatError("checkpoint corrupted: checksum frame incomplete (" + path + ")");
    }
    const std::uint8_t* payload = buf.data() + 20;
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, payload + len, 4);
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(payload), static_cast<uInt>(len)));
    if (crc != stored_crc) {
        throw FormatError("checkpoint corrupted: checksum mismatch (" + path + ")");
    }

    Reader r(payload, len);
    Checkpoint ck;
    ck.version = ver;
    const std::uint64_t config_len = r.u64();
    ck.config = TrainConfig::from_json(r.bytes(config_len));
    ck.fold_id = static_cast<int>(r.i64());
    ck.epochs_done = static_cast<int>(r.i64());
    ck.moments.t = r.i64();
    ck.seed_state = r.u64();
    ck.params = r.params(true);
    ck.moments.m = r.params(true);
    ck.moments.v = r.params(true);
    return ck;
}

FoldResult run_fold(const TrainConfig& config, const ArchConfig& arch, const Dataset& train,
                    const Dataset& test, const FoldPlan* plan, int fold_id,
                    MetricsWriter* metrics, const Checkpoint* resume,
                    const std::string& checkpoint_path) {
    config.validate();
    arch.validate();

    FoldResult result;
    int start_epoch = 0;
    if (resume) {
        result.params = resume->params;
        result.moments = resume->moments;
        start_epoch = resume->epochs_done;
    } else {
        result.params = CapsNetParams::init(arch, config.routing, config.seed);
        result.moments = AdamState::zeros_like(result.params);
    }

    const std::vector<std::int64_t> base_idx =
        plan ? plan->train_indices(fold_id) : [&] {
            std::vector<std::int64_t> all(static_cast<std::size_t>(train.n()));
            for (std::int64_t i = 0; i < train.n(); ++i) all[static_cast<std::size_t>(i)] = i;
            return all;
        }();
    const std::vector<std::int64_t> val_idx = plan ? plan->fold_indices(fold_id)
                                                   : std::vector<std::int64_t>{};

    CapsNetParams grad = CapsNetParams::zeros_like(result.params);

    for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        // shuffle the pristine order: the permutation must depend on
        // (seed, fold, epoch) only, or resumed runs diverge
        std::vector<std::int64_t> train_idx = base_idx;
        Rng rng(epoch_seed(config.seed, fold_id, epoch));
        rng.shuffle(train_idx);

        double loss_sum = 0.0;
        std::int64_t correct = 0, seen = 0;
        bool aborted = false;
        for (std::int64_t off = 0; off < static_cast<std::int64_t>(train_idx.size());
             off += config.batch_size) {
            const std::int64_t count = std::min(
                config.batch_size, static_cast<std::int64_t>(train_idx.size()) - off);
            grad.for_each_tensor([](Tensor& t) { t.fill(0.0); });
            const BatchStats st = accumulate_batch_gradients(
                result.params, arch, config.routing, train, train_idx.data() + off, count,
                config.workers, grad);
            if (!st.finite || !std::isfinite(st.loss_sum)) {
                result.aborted = true;
                result.abort_reason = "non-finite training loss (fold " + std::to_string(fold_id) +
                                      ", epoch " + std::to_string(epoch) + ", batch offset " +
                                      std::to_string(off) +
                                      "): check learning rate / squash overflow";
                aborted = true;
                break;
            }
            const double inv = 1.0 / static_cast<double>(count);
            grad.for_each_tensor([&](Tensor& t) {
                for (double& v : t.data) v *= inv;
            });
            adam_step(result.params, grad, result.moments, config.opt);
            loss_sum += st.loss_sum;
            correct += st.correct;
            seen += count;
        }

        EpochRecord rec;
        rec.fold = fold_id;
        rec.epoch = epoch;
        if (aborted) {
            rec.train_acc = rec.val_acc = rec.test_acc = std::nan("");
            rec.train_loss = rec.test_loss = std::nan("");
        } else {
            rec.train_acc = seen > 0 ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
            rec.train_loss = seen > 0 ? loss_sum / static_cast<double>(seen) : 0.0;
            const auto [test_acc, test_loss] =
                evaluate(result.params, arch, test, config.routing, config.workers);
            rec.test_acc = test_acc;
            rec.test_loss = test_loss;
            if (!val_idx.empty()) {
                const auto [val_acc, val_loss] =
                    evaluate(result.params, arch, train, config.routing, config.workers, &val_idx);
                (void)val_loss;
                rec.val_acc = val_acc;
            } else {
                rec.val_acc = test_acc;  // plain split: no held-out fold
            }
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        result.records.push_back(rec);
        if (metrics) metrics->write(rec);
        if (aborted) break;

        if (!checkpoint_path.empty()) {
            Checkpoint ck;
            ck.config = config;
            ck.params = result.params;
            ck.moments = result.moments;
            ck.fold_id = fold_id;
            ck.epochs_done = epoch + 1;
            ck.seed_state = config.seed;
            save_checkpoint(checkpoint_path, ck);
        }
    }
    return result;
}

std::string ExperimentSummary::to_csv() const {
    std::ostringstream os;
    os << "function,acc_mean,acc_std,loss_mean,loss_std,folds,aborted\n";
    for (const auto& r : rows) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f,%d,%d\n", r.function.c_str(),
                      r.acc_mean, r.acc_std, r.loss_mean, r.loss_std, r.folds, r.aborted);
        os << buf;
    }
    return os.str();
}

ExperimentSummary run_experiment(const TrainConfig& config, const ArchConfig& arch,
                                 const Dataset& train, const Dataset& test,
                                 const std::vector<SquashSpec>& sweep, MetricsWriter* metrics) {
    config.validate();
    const int k = config.folds >= 2 ? config.folds : 2;
    const FoldPlan plan = kfold_split(train.n(), k, config.seed);

    ExperimentSummary summary;
    for (const SquashSpec& squash : sweep) {
        TrainConfig c = config;
        c.squash = squash;
        c.routing.squash = squash;

        std::vector<double> accs, losses;
        int aborted = 0;
        for (int f = 0; f < k; ++f) {
            const FoldResult r = run_fold(c, arch, train, test, &plan, f, metrics);
            if (r.aborted || r.records.empty()) {
                ++aborted;
                continue;
            }
            const EpochRecord& last = r.records.back();
            accs.push_back(last.test_acc);
            losses.push_back(last.test_loss);
        }

        SquashSummary row;
        row.function = squash.name();
        row.folds = k;
        row.aborted = aborted;
        if (!accs.empty()) {
            double am = 0, lm = 0;
            for (double a : accs) am += a;
            for (double l : losses) lm += l;
            am /= static_cast<double>(accs.size());
            lm /= static_cast<double>(losses.size());
            double av = 0, lv = 0;
            for (double a : accs) av += (a - am) * (a - am);
            for (double l : losses) lv += (l - lm) * (l - lm);
            av = accs.size() > 1 ? std::sqrt(av / static_cast<double>(accs.size() - 1)) : 0.0;
            lv = losses.size() > 1 ? std::sqrt(lv / static_cast<double>(losses.size() - 1)) : 0.0;
            row.acc_mean = am * 100.0;  // percent, Table-style
            row.acc_std = av * 100.0;
            row.loss_mean = lm * 1000.0;  // mean margin loss per sample x1000
            row.loss_std = lv * 1000.0;
        }
        summary.rows.push_back(row);
    }
    return summary;
}

}  // namespace capskit
