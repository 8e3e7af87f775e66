// The DarkRoom task family: a 10x10 grid, five actions, an unknown goal cell
// that pays reward 1 on every step it is occupied, horizon 100. Includes the
// task distribution split, a shortest-path optimal policy, and a
// finite-horizon value-iteration oracle used as ground truth by the tests.
#pragma once

#include <algorithm>
#include <cstdlib>
#include <numeric>
#include <utility>
#include <vector>

#include "sicql/rng.hpp"
#include "sicql/tensor.hpp"

namespace sicql::darkroom {

inline constexpr int kGrid = 10;
inline constexpr int kNumCells = kGrid * kGrid;
inline constexpr int kNumActions = 5;
inline constexpr int kNumTasks = kNumCells;
inline constexpr int kNumTrainTasks = 80;

// Action encoding. Coordinate convention: up = (0,+1), down = (0,-1),
// left = (-1,0), right = (+1,0); borders clamp.
enum Action : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3, kStay = 4 };

struct GridState {
    int x = 0;
    int y = 0;
    bool operator==(const GridState&) const = default;
};

inline bool in_bounds(GridState s) {
    return s.x >= 0 && s.x < kGrid && s.y >= 0 && s.y < kGrid;
}

inline int cell_index(GridState s) { return s.y * kGrid + s.x; }
inline GridState cell_state(int index) { return GridState{index % kGrid, index / kGrid}; }

inline int manhattan(GridState a, GridState b) {
    return std::abs(a.x - b.x) + std::abs(a.y - b.y);
}

struct TaskSpec {
    GridState goal;
    int task_id = 0;

    static TaskSpec from_id(int id) { return TaskSpec{cell_state(id), id}; }
    bool operator==(const TaskSpec&) const = default;
};

struct Transition {
    GridState state;
    int action = kStay;
    double reward = 0.0;
    GridState next_state;
    bool done = false;
};

struct EpisodeConfig {
    int horizon = 100;
    double discount = 0.99;

    void validate() const {
        if (horizon <= 0) throw TensorError("horizon must be > 0");
        if (!(discount > 0.0 && discount < 1.0)) throw TensorError("discount must be in (0,1)");
    }
};

// One environment step: move with border clamping; reward 1 iff the next
// state is the goal (paid on every step the goal cell is occupied).
inline std::pair<GridState, double> step(GridState s, int action, const TaskSpec& task) {
    GridState n = s;
    switch (action) {
        case kUp: n.y += 1; break;
        case kDown: n.y -= 1; break;
        case kLeft: n.x -= 1; break;
        case kRight: n.x += 1; break;
        case kStay: break;
        default: throw TensorError("invalid action");
    }
    n.x = std::clamp(n.x, 0, kGrid - 1);
    n.y = std::clamp(n.y, 0, kGrid - 1);
    return {n, n == task.goal ? 1.0 : 0.0};
}

struct TaskSplit {
    std::vector<TaskSpec> train;
    std::vector<TaskSpec> test;
};

// Disjoint exhaustive 80/20 split of the 100 goals, deterministic in the seed.
inline TaskSplit sample_tasks(uint64_t seed) {
    std::vector<int> ids(kNumTasks);
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng = Rng::fan(seed, Stream::data, /*substream=*/0);
    for (int i = kNumTasks - 1; i > 0; --i) {
        const int j = rng.uniform_int(i + 1);
        std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(j)]);
    }
    TaskSplit split;
    for (int i = 0; i < kNumTasks; ++i) {
        (i < kNumTrainTasks ? split.train : split.test).push_back(TaskSpec::from_id(ids[static_cast<size_t>(i)]));
    }
    return split;
}

// Shortest-path policy: close the x gap first, then the y gap, stay on the
// goal. Every distance-reducing move is equally optimal on this grid, so the
// x-first rule is purely a deterministic tie-break.
inline int optimal_action(GridState s, const TaskSpec& task) {
    if (s == task.goal) return kStay;
    const int dx = task.goal.x - s.x;
    if (dx > 0) return kRight;
    if (dx < 0) return kLeft;
    return task.goal.y - s.y > 0 ? kUp : kDown;
}

// Preference order matching optimal_action's tie-break, used when reading an
// argmax out of the value tables.
inline constexpr int kGreedyOrder[kNumActions] = {kRight, kLeft, kUp, kDown, kStay};

// Finite-horizon tables from backward induction:
//   Q_t(s,a) = r(s,a) + discount * V_{t+1}(s'),  V_t(s) = max_a Q_t(s,a),
// with V_H = 0. Q is indexed t in [0,H), V is indexed t in [0,H].
class ValueTables {
public:
    ValueTables(int horizon, std::vector<double> q, std::vector<double> v)
        : horizon_(horizon), q_(std::move(q)), v_(std::move(v)) {}

    int horizon() const { return horizon_; }

    double q_at(int t, GridState s, int a) const {
        return q_[(static_cast<size_t>(t) * kNumCells + static_cast<size_t>(cell_index(s))) *
                      kNumActions +
                  static_cast<size_t>(a)];
    }
    double v_at(int t, GridState s) const {
        return v_[static_cast<size_t>(t) * kNumCells + static_cast<size_t>(cell_index(s))];
    }

    // Argmax over actions at time t with the shared tie-break order; ties are
    // resolved to the first action (in kGreedyOrder) within `tie_eps` of the max.
    int greedy_action(int t, GridState s, double tie_eps = 1e-9) const {
        double best = q_at(t, s, 0);
        for (int a = 1; a < kNumActions; ++a) best = std::max(best, q_at(t, s, a));
        for (int a : kGreedyOrder) {
            if (q_at(t, s, a) >= best - tie_eps) return a;
        }
        return kStay;  // unreachable
    }

    // True when more than one action attains the time-t maximum within tie_eps.
    bool argmax_tied(int t, GridState s, double tie_eps = 1e-9) const {
        double best = q_at(t, s, 0);
        for (int a = 1; a < kNumActions; ++a) best = std::max(best, q_at(t, s, a));
        int hits = 0;
        for (int a = 0; a < kNumActions; ++a) {
            if (q_at(t, s, a) >= best - tie_eps) ++hits;
        }
        return hits > 1;
    }

private:
    int horizon_;
    std::vector<double> q_;  // [H][cells][actions]
    std::vector<double> v_;  // [H+1][cells]
};

inline ValueTables value_iteration(const TaskSpec& task, const EpisodeConfig& cfg) {
    cfg.validate();
    const int H = cfg.horizon;
    const double gamma = cfg.discount;

    // Deterministic transition/reward tables for this task.
    std::vector<int> next(kNumCells * kNumActions);
    std::vector<double> rew(kNumCells * kNumActions);
    for (int c = 0; c < kNumCells; ++c) {
        for (int a = 0; a < kNumActions; ++a) {
            auto [n, r] = step(cell_state(c), a, task);
            next[static_cast<size_t>(c * kNumActions + a)] = cell_index(n);
            rew[static_cast<size_t>(c * kNumActions + a)] = r;
        }
    }

    std::vector<double> q(static_cast<size_t>(H) * kNumCells * kNumActions, 0.0);
    std::vector<double> v(static_cast<size_t>(H + 1) * kNumCells, 0.0);
    for (int t = H - 1; t >= 0; --t) {
        const double* vn = v.data() + static_cast<size_t>(t + 1) * kNumCells;
        double* vt = v.data() + static_cast<size_t>(t) * kNumCells;
        double* qt = q.data() + static_cast<size_t>(t) * kNumCells * kNumActions;
        for (int c = 0; c < kNumCells; ++c) {
            double best = -1.0;
            for (int a = 0; a < kNumActions; ++a) {
                const size_t idx = static_cast<size_t>(c * kNumActions + a);
                const double qv = rew[idx] + gamma * vn[next[idx]];
                qt[idx] = qv;
                best = std::max(best, qv);
            }
            vt[c] = best;
        }
    }
    return ValueTables(H, std::move(q), std::move(v));
}

// Undiscounted return of the optimal policy from a given start: the goal is
// reached after manhattan-distance steps and every step from arrival onward
// pays 1, so the return is H for d <= 1 and H - (d-1) otherwise.
inline double optimal_return(GridState start, const TaskSpec& task, int horizon) {
    const int d = manhattan(start, task.goal);
    const int late = std::max(d - 1, 0);
    return static_cast<double>(horizon - std::min(late, horizon));
}

// Mean optimal return over a uniform random start cell.
inline double optimal_mean_return(const TaskSpec& task, int horizon) {
    double s = 0.0;
    for (int c = 0; c < kNumCells; ++c) s += optimal_return(cell_state(c), task, horizon);
    return s / static_cast<double>(kNumCells);
}

}  // namespace sicql::darkroom
