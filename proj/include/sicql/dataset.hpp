// Multi-task offline datasets: epsilon-mixed suboptimal trajectory
// collection, quality calibration against the optimal policy, binary
// persistence, and the sampling views used by world-model and policy
// training (query transitions, h-step prompt windows, k-step encoder
// histories).
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "sicql/darkroom.hpp"
#include "sicql/rng.hpp"
#include "sicql/threading.hpp"

namespace sicql {

struct DatasetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Trajectory {
    int task_id = 0;
    std::vector<darkroom::Transition> transitions;

    darkroom::GridState start() const { return transitions.front().state; }

    double undiscounted_return() const {
        double s = 0.0;
        for (const auto& t : transitions) s += t.reward;
        return s;
    }
};

struct TaskDataset {
    darkroom::TaskSpec task;
    std::vector<Trajectory> trajectories;
    double epsilon_used = 0.0;
    int horizon = 0;

    double mean_return() const {
        double s = 0.0;
        for (const auto& tr : trajectories) s += tr.undiscounted_return();
        return trajectories.empty() ? 0.0 : s / static_cast<double>(trajectories.size());
    }
};

// Roll one full-horizon episode under the epsilon-mixture policy: at every
// step independently, the optimal action with probability epsilon, otherwise
// a uniform random action. Start cell uniform random. Episodes never end
// early at the goal; done marks only t == H-1.
inline Trajectory rollout_mixture(const darkroom::TaskSpec& task, double epsilon,
                                  const darkroom::EpisodeConfig& cfg, Rng& rng) {
    Trajectory traj;
    traj.task_id = task.task_id;
    traj.transitions.reserve(static_cast<size_t>(cfg.horizon));
    darkroom::GridState s{rng.uniform_int(darkroom::kGrid), rng.uniform_int(darkroom::kGrid)};
    for (int t = 0; t < cfg.horizon; ++t) {
        const int a = rng.uniform() < epsilon ? darkroom::optimal_action(s, task)
                                              : rng.uniform_int(darkroom::kNumActions);
        auto [n, r] = darkroom::step(s, a, task);
        traj.transitions.push_back({s, a, r, n, t == cfg.horizon - 1});
        s = n;
    }
    return traj;
}

inline TaskDataset collect_dataset(const darkroom::TaskSpec& task, double epsilon, int n_traj,
                                   const darkroom::EpisodeConfig& cfg, uint64_t seed) {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw DatasetError("epsilon must be in [0,1]");
    if (n_traj <= 0) throw DatasetError("n_traj must be > 0");
    cfg.validate();
    TaskDataset ds;
    ds.task = task;
    ds.epsilon_used = epsilon;
    ds.horizon = cfg.horizon;
    ds.trajectories.reserve(static_cast<size_t>(n_traj));
    for (int i = 0; i < n_traj; ++i) {
        // One stream per (task, trajectory): generation order never matters.
        Rng rng = Rng::fan(seed, Stream::data,
                           (static_cast<uint64_t>(task.task_id) << 32) | static_cast<uint64_t>(i + 1));
        ds.trajectories.push_back(rollout_mixture(task, epsilon, cfg, rng));
    }
    return ds;
}

// Monte-Carlo mean return of the mixture policy, averaged over all 100 tasks.
inline double mixture_mean_return(double epsilon, const darkroom::EpisodeConfig& cfg, uint64_t seed,
                                  int episodes_per_task) {
    double total = 0.0;
    int64_t count = 0;
    for (int id = 0; id < darkroom::kNumTasks; ++id) {
        const auto task = darkroom::TaskSpec::from_id(id);
        for (int e = 0; e < episodes_per_task; ++e) {
            Rng rng = Rng::fan(seed, Stream::calibrate,
                               (static_cast<uint64_t>(id) << 32) | static_cast<uint64_t>(e));
            total += rollout_mixture(task, epsilon, cfg, rng).undiscounted_return();
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

inline double optimal_mean_return_all_tasks(int horizon) {
    double s = 0.0;
    for (int id = 0; id < darkroom::kNumTasks; ++id) {
        s += darkroom::optimal_mean_return(darkroom::TaskSpec::from_id(id), horizon);
    }
    return s / static_cast<double>(darkroom::kNumTasks);
}

struct CalibrationResult {
    double epsilon = 0.0;
    double ratio = 0.0;           // dataset mean return / optimal mean return
    double optimal_mean = 0.0;
    int probes = 0;
};

// Bisection on epsilon against Monte-Carlo return-ratio estimates. The
// mixture return is monotone increasing in epsilon; we stop once the probe
// ratio is within `tol` of target_ratio. Probes use >= 200 episodes spread
// over all 100 tasks (episodes_per_task >= 2).
inline CalibrationResult calibrate_epsilon(const darkroom::EpisodeConfig& cfg, double target_ratio,
                                           uint64_t seed, int episodes_per_task = 10,
                                           double tol = 0.02) {
    if (!(target_ratio > 0.0 && target_ratio < 1.0)) {
        throw DatasetError("target_ratio must be in (0,1)");
    }
    if (episodes_per_task < 2) throw DatasetError("need >= 200 probe episodes (2 per task)");
    const double optimal_mean = optimal_mean_return_all_tasks(cfg.horizon);

    auto ratio_at = [&](double eps, int probe_idx) {
        return mixture_mean_return(eps, cfg, seed + static_cast<uint64_t>(probe_idx), episodes_per_task) /
               optimal_mean;
    };

    CalibrationResult res;
    res.optimal_mean = optimal_mean;
    double lo = 0.0, hi = 1.0;
    double r_lo = ratio_at(lo, res.probes++);
    double r_hi = ratio_at(hi, res.probes++);
    if (!(r_lo < target_ratio && target_ratio < r_hi)) {
        throw DatasetError("failed to bracket target ratio; return oracle is suspect");
    }
    double mid = 0.5, r_mid = 0.0;
    for (int it = 0; it < 60; ++it) {
        mid = 0.5 * (lo + hi);
        r_mid = ratio_at(mid, res.probes++);
        if (std::abs(r_mid - target_ratio) < tol) break;
        if (r_mid < target_ratio) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (std::abs(r_mid - target_ratio) >= tol) {
        throw DatasetError("epsilon calibration did not converge");
    }
    res.epsilon = mid;
    res.ratio = r_mid;
    return res;
}

// ---------------------------------------------------------------------------
// Persistence. One task per file; fixed little-endian layout; byte-identical
// round trips.
// ---------------------------------------------------------------------------

namespace detail {
inline constexpr char kDatasetMagic[8] = {'S', 'I', 'C', 'Q', 'L', 'D', 'S', '\n'};
inline constexpr uint32_t kDatasetVersion = 1;
}  // namespace detail

inline void save_dataset(const std::string& path, const TaskDataset& ds) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DatasetError("cannot open for write: " + path);
    auto w32 = [&](uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
    os.write(detail::kDatasetMagic, 8);
    w32(detail::kDatasetVersion);
    w32(static_cast<uint32_t>(darkroom::kGrid));
    w32(static_cast<uint32_t>(ds.horizon));
    w32(static_cast<uint32_t>(ds.task.task_id));
    os.write(reinterpret_cast<const char*>(&ds.epsilon_used), 8);
    w32(static_cast<uint32_t>(ds.trajectories.size()));
    for (const Trajectory& tr : ds.trajectories) {
        if (static_cast<int>(tr.transitions.size()) != ds.horizon) {
            throw DatasetError("trajectory length does not match horizon");
        }
        for (const auto& t : tr.transitions) {
            const unsigned char rec[5] = {
                static_cast<unsigned char>(darkroom::cell_index(t.state)),
                static_cast<unsigned char>(t.action),
                static_cast<unsigned char>(t.reward > 0.5 ? 1 : 0),
                static_cast<unsigned char>(darkroom::cell_index(t.next_state)),
                static_cast<unsigned char>(t.done ? 1 : 0)};
            os.write(reinterpret_cast<const char*>(rec), 5);
        }
    }
    if (!os) throw DatasetError("write failed: " + path);
}

inline TaskDataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DatasetError("cannot open dataset: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kDatasetMagic, 8) != 0) {
        throw DatasetError("not a dataset file: " + path);
    }
    auto r32 = [&]() {
        uint32_t v;
        is.read(reinterpret_cast<char*>(&v), 4);
        if (!is) throw DatasetError("truncated dataset file: " + path);
        return v;
    };
    const uint32_t version = r32();
    if (version != detail::kDatasetVersion) {
        throw DatasetError("unsupported dataset version " + std::to_string(version));
    }
    const uint32_t grid = r32();
    if (grid != darkroom::kGrid) throw DatasetError("grid size mismatch");
    TaskDataset ds;
    ds.horizon = static_cast<int>(r32());
    ds.task = darkroom::TaskSpec::from_id(static_cast<int>(r32()));
    is.read(reinterpret_cast<char*>(&ds.epsilon_used), 8);
    const uint32_t n_traj = r32();
    ds.trajectories.resize(n_traj);
    std::vector<unsigned char> buf(static_cast<size_t>(ds.horizon) * 5);
    for (uint32_t i = 0; i < n_traj; ++i) {
        is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!is) throw DatasetError("truncated dataset file: " + path);
        Trajectory& tr = ds.trajectories[i];
        tr.task_id = ds.task.task_id;
        tr.transitions.resize(static_cast<size_t>(ds.horizon));
        for (int t = 0; t < ds.horizon; ++t) {
            const unsigned char* rec = buf.data() + static_cast<size_t>(t) * 5;
            tr.transitions[static_cast<size_t>(t)] = {
                darkroom::cell_state(rec[0]), static_cast<int>(rec[1]),
                static_cast<double>(rec[2]), darkroom::cell_state(rec[3]), rec[4] != 0};
        }
    }
    return ds;
}

inline uint64_t file_checksum(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DatasetError("cannot open for checksum: " + path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (is) {
        is.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<size_t>(is.gcount()), h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Multi-task views and sampling.
// ---------------------------------------------------------------------------

class MultiTaskDataset {
public:
    MultiTaskDataset() = default;
    explicit MultiTaskDataset(std::vector<TaskDataset> tasks) : tasks_(std::move(tasks)) {}

    const std::vector<TaskDataset>& tasks() const { return tasks_; }
    std::vector<TaskDataset>& tasks() { return tasks_; }
    int num_tasks() const { return static_cast<int>(tasks_.size()); }
    int horizon() const { return tasks_.empty() ? 0 : tasks_.front().horizon; }

    std::vector<int> task_ids() const {
        std::vector<int> ids;
        for (const auto& t : tasks_) ids.push_back(t.task.task_id);
        return ids;
    }

    int64_t total_transitions() const {
        int64_t n = 0;
        for (const auto& t : tasks_) {
            n += static_cast<int64_t>(t.trajectories.size()) * t.horizon;
        }
        return n;
    }

    double mean_return() const {
        double s = 0.0;
        int64_t n = 0;
        for (const auto& t : tasks_) {
            for (const auto& tr : t.trajectories) s += tr.undiscounted_return();
            n += static_cast<int64_t>(t.trajectories.size());
        }
        return n == 0 ? 0.0 : s / static_cast<double>(n);
    }

    // Mean optimal return over this set's tasks (uniform random starts).
    double optimal_mean_return() const {
        double s = 0.0;
        for (const auto& t : tasks_) s += darkroom::optimal_mean_return(t.task, t.horizon);
        return tasks_.empty() ? 0.0 : s / static_cast<double>(tasks_.size());
    }

    double quality_ratio() const { return mean_return() / optimal_mean_return(); }

private:
    std::vector<TaskDataset> tasks_;
};

inline MultiTaskDataset collect_dataset_set(const std::vector<darkroom::TaskSpec>& tasks,
                                            double epsilon, int n_traj,
                                            const darkroom::EpisodeConfig& cfg, uint64_t seed,
                                            int workers = 1) {
    std::vector<TaskDataset> out(tasks.size());
    parallel_shards(workers, [&](int w) {
        auto [b, e] = shard_range(static_cast<int64_t>(tasks.size()), std::max(workers, 1), w);
        for (int64_t i = b; i < e; ++i) {
            out[static_cast<size_t>(i)] =
                collect_dataset(tasks[static_cast<size_t>(i)], epsilon, n_traj, cfg, seed);
        }
    });
    return MultiTaskDataset(std::move(out));
}

inline std::string dataset_file_name(int task_id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "task_%03d.bin", task_id);
    return buf;
}

inline void save_dataset_set(const std::string& dir, const MultiTaskDataset& set) {
    std::filesystem::create_directories(dir);
    for (const auto& ds : set.tasks()) {
        save_dataset(dir + "/" + dataset_file_name(ds.task.task_id), ds);
    }
}

// Loads every per-task file and re-checks the shipped quality bound: mean
// return must stay below 40% of the optimal policy return.
inline MultiTaskDataset load_dataset_set(const std::string& dir, const std::vector<int>& task_ids,
                                         double max_quality_ratio = 0.40) {
    std::vector<TaskDataset> tasks;
    tasks.reserve(task_ids.size());
    for (int id : task_ids) {
        tasks.push_back(load_dataset(dir + "/" + dataset_file_name(id)));
        if (tasks.back().task.task_id != id) throw DatasetError("task id mismatch in " + dir);
    }
    MultiTaskDataset set(std::move(tasks));
    const double ratio = set.quality_ratio();
    if (ratio >= max_quality_ratio) {
        throw DatasetError("dataset quality bound violated: ratio " + std::to_string(ratio) +
                           " >= " + std::to_string(max_quality_ratio));
    }
    return set;
}

inline uint64_t dataset_set_checksum(const std::string& dir, const std::vector<int>& task_ids) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (int id : task_ids) {
        const std::string f = dir + "/" + dataset_file_name(id);
        const uint64_t fh = file_checksum(f);
        h = fnv1a64(&fh, sizeof(fh), h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Batch sampling.
// ---------------------------------------------------------------------------

// One element of a training batch, by reference into the dataset: a query
// transition and an h-step prompt window from the same task. The window is
// sampled independently of the query position.
struct BatchItem {
    int task_index = 0;   // index into MultiTaskDataset::tasks()
    int query_traj = 0;
    int query_t = 0;
    int window_traj = 0;
    int window_t0 = 0;
};

struct BatchIndices {
    int h = 0;
    int k = 0;
    std::vector<BatchItem> items;
};

inline BatchIndices sample_batch_indices(const MultiTaskDataset& set, int batch_size, int h, int k,
                                         Rng& rng) {
    if (set.num_tasks() == 0) throw DatasetError("empty dataset set");
    if (h < 1 || k < 1) throw DatasetError("h and k must be >= 1");
    const int H = set.horizon();
    if (h > H) throw DatasetError("prompt window h exceeds horizon");
    BatchIndices out;
    out.h = h;
    out.k = k;
    out.items.resize(static_cast<size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) {
        BatchItem& it = out.items[static_cast<size_t>(i)];
        it.task_index = rng.uniform_int(set.num_tasks());
        const auto& ds = set.tasks()[static_cast<size_t>(it.task_index)];
        if (ds.trajectories.empty()) throw DatasetError("task dataset is empty");
        it.query_traj = rng.uniform_int(static_cast<int>(ds.trajectories.size()));
        it.query_t = rng.uniform_int(H);
        it.window_traj = rng.uniform_int(static_cast<int>(ds.trajectories.size()));
        it.window_t0 = rng.uniform_int(H - h + 1);
    }
    return out;
}

// A zero-padded slot of a k-step encoder history.
struct EncStep {
    bool present = false;
    int state_cell = 0;
    int action = 0;
    double reward = 0.0;
};

// The k-step history eta_j ending at window position j: slots for window
// positions j-k+1 .. j, front-padded with absent slots where the window
// starts, and with the final slot's reward zeroed (the reward of the step
// being encoded is not part of eta).
inline std::vector<EncStep> encoder_history(const std::vector<darkroom::Transition>& window, int j,
                                            int k) {
    if (j < 0 || j >= static_cast<int>(window.size())) throw DatasetError("history position out of range");
    std::vector<EncStep> hist(static_cast<size_t>(k));
    for (int slot = 0; slot < k; ++slot) {
        const int pos = j - (k - 1) + slot;
        if (pos < 0) continue;
        const auto& t = window[static_cast<size_t>(pos)];
        hist[static_cast<size_t>(slot)] = {true, darkroom::cell_index(t.state), t.action,
                                           slot == k - 1 ? 0.0 : t.reward};
    }
    return hist;
}

// Fully materialized batch (tests and the raw-prompt ablations use this; the
// trainer's hot path reads the same indices through the prompt cache).
struct TrainingBatch {
    int h = 0;
    int k = 0;
    struct Item {
        int task_id = 0;
        darkroom::Transition query;
        std::vector<darkroom::Transition> window;
    };
    std::vector<Item> items;
};

inline TrainingBatch materialize_batch(const MultiTaskDataset& set, const BatchIndices& idx) {
    TrainingBatch out;
    out.h = idx.h;
    out.k = idx.k;
    out.items.resize(idx.items.size());
    for (size_t i = 0; i < idx.items.size(); ++i) {
        const BatchItem& bi = idx.items[i];
        const auto& ds = set.tasks()[static_cast<size_t>(bi.task_index)];
        auto& item = out.items[i];
        item.task_id = ds.task.task_id;
        item.query = ds.trajectories[static_cast<size_t>(bi.query_traj)]
                         .transitions[static_cast<size_t>(bi.query_t)];
        const auto& wtraj = ds.trajectories[static_cast<size_t>(bi.window_traj)].transitions;
        item.window.assign(wtraj.begin() + bi.window_t0, wtraj.begin() + bi.window_t0 + idx.h);
    }
    return out;
}

inline TrainingBatch sample_batch(const MultiTaskDataset& set, int batch_size, int h, int k,
                                  Rng& rng) {
    return materialize_batch(set, sample_batch_indices(set, batch_size, h, k, rng));
}

}  // namespace sicql
