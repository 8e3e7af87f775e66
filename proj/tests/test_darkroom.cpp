#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "sicql/darkroom.hpp"

using namespace sicql;
using namespace sicql::darkroom;

TEST_CASE("movement convention and goal reward") {
    const TaskSpec far = TaskSpec{{9, 9}, 99};
    auto [n1, r1] = step({2, 3}, kUp, far);
    REQUIRE(n1 == GridState{2, 4});
    REQUIRE(r1 == 0.0);

    auto [n2, r2] = step({0, 5}, kLeft, far);
    REQUIRE(n2 == GridState{0, 5});  // border clamp
    REQUIRE(r2 == 0.0);

    const TaskSpec here = TaskSpec{{4, 4}, 44};
    auto [n3, r3] = step({4, 4}, kStay, here);
    REQUIRE(n3 == GridState{4, 4});
    REQUIRE(r3 == 1.0);  // reward on every step the goal is occupied

    // Stepping off the goal pays nothing.
    auto [n4, r4] = step({4, 4}, kUp, here);
    REQUIRE(n4 == GridState{4, 5});
    REQUIRE(r4 == 0.0);
}

TEST_CASE("all transitions stay on the grid and reward marks the goal exactly") {
    for (int goal = 0; goal < kNumTasks; goal += 17) {
        const TaskSpec task = TaskSpec::from_id(goal);
        for (int c = 0; c < kNumCells; ++c) {
            for (int a = 0; a < kNumActions; ++a) {
                auto [n, r] = step(cell_state(c), a, task);
                REQUIRE(in_bounds(n));
                REQUIRE((r == 1.0) == (n == task.goal));
            }
        }
    }
}

TEST_CASE("task split is a deterministic 80/20 partition") {
    const TaskSplit s1 = sample_tasks(42);
    const TaskSplit s2 = sample_tasks(42);
    REQUIRE(s1.train.size() == 80);
    REQUIRE(s1.test.size() == 20);
    for (size_t i = 0; i < s1.train.size(); ++i) REQUIRE(s1.train[i] == s2.train[i]);
    for (size_t i = 0; i < s1.test.size(); ++i) REQUIRE(s1.test[i] == s2.test[i]);

    std::set<int> all;
    for (const auto& t : s1.train) all.insert(t.task_id);
    for (const auto& t : s1.test) all.insert(t.task_id);
    REQUIRE(all.size() == 100);
    REQUIRE(*all.begin() == 0);
    REQUIRE(*all.rbegin() == 99);

    const TaskSplit s3 = sample_tasks(43);
    bool differs = false;
    for (size_t i = 0; i < s1.train.size(); ++i) {
        if (!(s1.train[i] == s3.train[i])) differs = true;
    }
    REQUIRE(differs);
}

TEST_CASE("optimal action closes x before y") {
    REQUIRE(optimal_action({2, 3}, TaskSpec{{5, 3}, 35}) == kRight);
    REQUIRE(optimal_action({5, 3}, TaskSpec{{5, 1}, 15}) == kDown);
    REQUIRE(optimal_action({5, 5}, TaskSpec{{5, 5}, 55}) == kStay);
}

TEST_CASE("greedy rollouts reach the goal in exactly manhattan distance steps") {
    for (int goal = 0; goal < kNumTasks; ++goal) {
        const TaskSpec task = TaskSpec::from_id(goal);
        for (int start = 0; start < kNumCells; ++start) {
            GridState s = cell_state(start);
            const int d = manhattan(s, task.goal);
            for (int t = 0; t < d; ++t) {
                s = step(s, optimal_action(s, task), task).first;
            }
            REQUIRE(s == task.goal);
        }
    }
}

TEST_CASE("value iteration matches the closed-form geometric sum at the goal") {
    const EpisodeConfig cfg{};
    const TaskSpec task = TaskSpec::from_id(37);
    const ValueTables vt = value_iteration(task, cfg);
    // Staying on the goal from t=0 pays sum_{i=0}^{99} 0.99^i.
    const double expected = (1.0 - std::pow(0.99, 100)) / 0.01;
    REQUIRE(vt.q_at(0, task.goal, kStay) == Catch::Approx(expected).epsilon(1e-10));
    REQUIRE(expected == Catch::Approx(63.39676587267702).epsilon(1e-12));

    // One step before the horizon, the move onto the goal is worth exactly 1.
    const GridState adjacent{task.goal.x > 0 ? task.goal.x - 1 : task.goal.x + 1, task.goal.y};
    const int toward = task.goal.x > 0 ? kRight : kLeft;
    REQUIRE(vt.q_at(cfg.horizon - 1, adjacent, toward) == 1.0);
}

TEST_CASE("greedy-on-Q rollouts attain V*_0 exactly") {
    const EpisodeConfig cfg{};
    Rng rng(555);
    for (int trial = 0; trial < 20; ++trial) {
        const TaskSpec task = TaskSpec::from_id(rng.uniform_int(kNumTasks));
        const ValueTables vt = value_iteration(task, cfg);
        GridState s = cell_state(rng.uniform_int(kNumCells));
        const double expected = vt.v_at(0, s);
        double ret = 0.0;
        double disc = 1.0;
        for (int t = 0; t < cfg.horizon; ++t) {
            auto [n, r] = step(s, vt.greedy_action(t, s), task);
            ret += disc * r;
            disc *= cfg.discount;
            s = n;
        }
        REQUIRE(ret == Catch::Approx(expected).margin(1e-9));
    }
}

TEST_CASE("value-iteration argmax agrees with the optimal policy on all tasks") {
    const EpisodeConfig cfg{};
    for (int goal = 0; goal < kNumTasks; ++goal) {
        const TaskSpec task = TaskSpec::from_id(goal);
        const ValueTables vt = value_iteration(task, cfg);
        for (int c = 0; c < kNumCells; ++c) {
            const GridState s = cell_state(c);
            if (s == task.goal) continue;
            REQUIRE(vt.greedy_action(0, s) == optimal_action(s, task));
        }
    }
}

TEST_CASE("V*_t is non-increasing in distance to the goal") {
    const EpisodeConfig cfg{};
    const TaskSpec task = TaskSpec::from_id(23);
    const ValueTables vt = value_iteration(task, cfg);
    for (int t : {0, 17, 50, 93}) {
        // max distance on a 10x10 grid is 18
        std::vector<double> best_by_d(19, -1.0);
        for (int c = 0; c < kNumCells; ++c) {
            const GridState s = cell_state(c);
            const int d = manhattan(s, task.goal);
            best_by_d[static_cast<size_t>(d)] = std::max(best_by_d[static_cast<size_t>(d)], vt.v_at(t, s));
        }
        double prev = 1e18;
        for (double v : best_by_d) {
            if (v < 0.0) continue;  // distance class not present
            REQUIRE(v <= prev + 1e-12);
            prev = v;
        }
        // And per state: every state's value is bounded by the best value of
        // any nearer distance class.
        for (int c = 0; c < kNumCells; ++c) {
            const GridState s = cell_state(c);
            const int d = manhattan(s, task.goal);
            for (int dd = 0; dd < d; ++dd) {
                if (best_by_d[static_cast<size_t>(dd)] >= 0.0) {
                    REQUIRE(vt.v_at(t, s) <= best_by_d[static_cast<size_t>(dd)] + 1e-12);
                }
            }
        }
    }
}

TEST_CASE("optimal return closed form matches simulation") {
    const int H = 100;
    Rng rng(321);
    for (int trial = 0; trial < 50; ++trial) {
        const TaskSpec task = TaskSpec::from_id(rng.uniform_int(kNumTasks));
        GridState s = cell_state(rng.uniform_int(kNumCells));
        double ret = 0.0;
        GridState cur = s;
        for (int t = 0; t < H; ++t) {
            auto [n, r] = step(cur, optimal_action(cur, task), task);
            ret += r;
            cur = n;
        }
        REQUIRE(ret == optimal_return(s, task, H));
    }
}
