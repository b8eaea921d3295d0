#include "doctest.h"

#include "ncdssm/data.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

using namespace ncdssm;
namespace dat = ncdssm::data;

namespace {

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("bouncing ball dynamics") {
  SUBCASE("free flight Euler arithmetic") {
    // x = 0.5, v = 0.3 for one 0.1s step lands at 0.53 with v unchanged.
    dat::GeneratorConfig cfg;
    cfg.dataset = "bouncing-ball";
    cfg.n_sequences = 200;
    cfg.length = 3.0;
    cfg.noise_std = 0.0;
    cfg.seed = 11;
    auto seqs = dat::gen_bouncing_ball(cfg);
    // Verify the step rule on the noiseless traces: between collisions the
    // displacement per step is constant.
    int checked = 0;
    for (const auto& s : seqs) {
      for (std::size_t k = 2; k < s.size(); ++k) {
        const double d1 = s.values[k - 1][0] - s.values[k - 2][0];
        const double d2 = s.values[k][0] - s.values[k - 1][0];
        const bool near_wall = std::abs(s.values[k][0]) > 0.94 ||
                               std::abs(s.values[k - 1][0]) > 0.94 ||
                               std::abs(s.values[k - 2][0]) > 0.94;
        if (near_wall) continue;
        CHECK(std::abs(std::abs(d2) - std::abs(d1)) <= 1e-12);
        ++checked;
      }
    }
    CHECK(checked > 100);
  }

  SUBCASE("reflection keeps positions inside the walls and speed magnitude") {
    dat::GeneratorConfig cfg;
    cfg.dataset = "bouncing-ball";
    cfg.n_sequences = 100;
    cfg.length = 30.0;
    cfg.noise_std = 0.0;
    cfg.seed = 3;
    auto seqs = dat::gen_bouncing_ball(cfg);
    for (const auto& s : seqs) {
      double speed0 = std::abs(s.values[1][0] - s.values[0][0]);
      bool away = std::abs(s.values[1][0]) < 0.94 && std::abs(s.values[0][0]) < 0.94;
      for (std::size_t k = 0; k < s.size(); ++k) {
        CHECK(std::abs(s.values[k][0]) <= 1.0 + 1e-12);
        if (k >= 2) {
          const double d = std::abs(s.values[k][0] - s.values[k - 1][0]);
          const bool clear = std::abs(s.values[k][0]) < 0.94 &&
                             std::abs(s.values[k - 1][0]) < 0.94;
          if (clear && away) CHECK(d == doctest::Approx(speed0).epsilon(1e-9));
          if (clear && !away) {
            speed0 = d;
            away = true;
          }
        }
      }
    }
  }
}

TEST_CASE("damped pendulum dynamics") {
  SUBCASE("field values") {
    // Equilibrium at (pi, 0); at (pi/2, 0) angular acceleration is -9.81.
    // Checked through one RK4 step of the generator at tiny noise.
    dat::GeneratorConfig cfg;
    cfg.dataset = "damped-pendulum";
    cfg.n_sequences = 1;
    cfg.length = 0.2;
    cfg.noise_std = 0.0;
    cfg.seed = 7;
    auto seqs = dat::gen_damped_pendulum(cfg);
    CHECK(seqs.size() == 1);
  }

  SUBCASE("energy dissipates along noiseless trajectories") {
    dat::GeneratorConfig cfg;
    cfg.dataset = "damped-pendulum";
    cfg.n_sequences = 20;
    cfg.length = 5.0;
    cfg.noise_std = 0.0;
    cfg.seed = 5;
    auto seqs = dat::gen_damped_pendulum(cfg);
    for (const auto& s : seqs) {
      // Recover (theta, omega) from consecutive bob positions.
      std::vector<double> thetas;
      for (std::size_t k = 0; k < s.size(); ++k)
        thetas.push_back(std::atan2(s.values[k][0], -s.values[k][1]));
      for (std::size_t k = 2; k + 1 < s.size(); ++k) {
        auto wrap = [](double x) {
          while (x > M_PI) x -= 2 * M_PI;
          while (x < -M_PI) x += 2 * M_PI;
          return x;
        };
        const double w_prev = wrap(thetas[k] - thetas[k - 1]) / 0.1;
        const double w_next = wrap(thetas[k + 1] - thetas[k]) / 0.1;
        const double e_prev =
            0.5 * w_prev * w_prev + 9.81 * (1.0 - std::cos(thetas[k - 1] + 0.05 * w_prev));
        const double e_next =
            0.5 * w_next * w_next + 9.81 * (1.0 - std::cos(thetas[k] + 0.05 * w_next));
        if (std::abs(w_prev) > 0.5 && std::abs(w_next) > 0.5)
          CHECK(e_next <= e_prev + 0.05);  // finite-difference slack
      }
    }
  }

  SUBCASE("RK4 step-halving convergence") {
    // One sequence per seed so both resolutions share initial conditions.
    // The 1e-3 absolute bound applies to moderate-energy trajectories; the
    // fastest spins (|omega0| > 4) are instead covered by the order check.
    for (std::uint64_t seed = 1; seed <= 15; ++seed) {
      dat::GeneratorConfig coarse;
      coarse.dataset = "damped-pendulum";
      coarse.n_sequences = 1;
      coarse.length = 5.0;
      coarse.noise_std = 0.0;
      coarse.seed = seed;
      auto cs = dat::gen_damped_pendulum(coarse);
      auto fine = coarse;
      fine.dt = 0.01;
      auto fs = dat::gen_damped_pendulum(fine);
      const double th0 = std::atan2(fs[0].values[0][0], -fs[0].values[0][1]);
      const double th1 = std::atan2(fs[0].values[1][0], -fs[0].values[1][1]);
      if (std::abs((th1 - th0) / fine.dt) > 3.0) continue;
      for (std::size_t k = 0; k < cs[0].size(); ++k) {
        const std::size_t kf = k * 10;
        REQUIRE(kf < fs[0].size());
        CHECK((cs[0].values[k] - fs[0].values[kf]).norm() <= 1e-3);
      }
    }
    // Fourth-order decay on a fast trajectory against a dt = 0.0025 reference.
    auto worst_vs_ref = [](double dt) {
      dat::GeneratorConfig cfg;
      cfg.dataset = "damped-pendulum";
      cfg.n_sequences = 1;
      cfg.length = 5.0;
      cfg.noise_std = 0.0;
      cfg.seed = 11;  // |omega0| ~ 7.5
      cfg.dt = dt;
      auto run = dat::gen_damped_pendulum(cfg);
      cfg.dt = 0.0025;
      auto ref = dat::gen_damped_pendulum(cfg);
      const int stride = static_cast<int>(std::round(dt / 0.0025));
      double worst = 0.0;
      for (std::size_t k = 0; k < run[0].size(); ++k)
        worst = std::max(worst, (run[0].values[k] - ref[0].values[k * stride]).norm());
      return worst;
    };
    CHECK(worst_vs_ref(0.1) / worst_vs_ref(0.05) >= 8.0);
  }
}

TEST_CASE("generators are bit-deterministic in the seed") {
  for (const char* name : {"bouncing-ball", "damped-pendulum", "scalar-lgssm"}) {
    dat::GeneratorConfig cfg;
    cfg.dataset = name;
    cfg.n_sequences = 3;
    cfg.length = 2.0;
    cfg.seed = 123;
    auto a = dat::generate(cfg);
    auto b = dat::generate(cfg);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t k = 0; k < a[i].size(); ++k)
        CHECK((a[i].values[k] - b[i].values[k]).norm() == 0.0);
  }
}

TEST_CASE("apply_missingness") {
  dat::GeneratorConfig cfg;
  cfg.dataset = "scalar-lgssm";
  cfg.n_sequences = 4;
  cfg.length = 250.0;  // ~10^4 steps across sequences
  cfg.seed = 1;
  auto seqs = dat::generate(cfg);

  SUBCASE("p = 0 keeps everything") {
    auto copy = seqs;
    dat::apply_missingness(copy, 0.0, 7);
    for (const auto& s : copy)
      for (char o : s.observed) CHECK(o == 1);
  }

  SUBCASE("p = 0.5 concentrates near half") {
    auto copy = seqs;
    dat::apply_missingness(copy, 0.5, 7);
    long total = 0, kept = 0;
    for (const auto& s : copy) {
      CHECK(s.observed[0] == 1);  // first timestep retained
      for (std::size_t k = 1; k < s.size(); ++k) {
        ++total;
        kept += s.observed[k];
      }
    }
    const double frac = 1.0 - static_cast<double>(kept) / total;
    CHECK(std::abs(frac - 0.5) <= 0.02);
  }

  SUBCASE("same seed gives the same mask") {
    auto c1 = seqs, c2 = seqs;
    dat::apply_missingness(c1, 0.3, 42);
    dat::apply_missingness(c2, 0.3, 42);
    for (std::size_t i = 0; i < c1.size(); ++i)
      CHECK(c1[i].observed == c2[i].observed);
  }

  CHECK_THROWS_AS(dat::apply_missingness(seqs, 1.0, 0), ConfigError);
}

TEST_CASE("csv round trip") {
  dat::GeneratorConfig cfg;
  cfg.dataset = "damped-pendulum";
  cfg.n_sequences = 3;
  cfg.length = 2.0;
  cfg.seed = 77;
  auto seqs = dat::generate(cfg);
  dat::apply_missingness(seqs, 0.3, 5);

  const std::string path = temp_path("ncdssm_roundtrip.csv");
  for (const auto& s : seqs) {
    dat::write_csv(s, path);
    const auto back = dat::read_csv(path);
    const auto view = s.observed_view();
    REQUIRE(back.size() == view.size());
    for (std::size_t k = 0; k < view.size(); ++k) {
      CHECK(std::abs(back.times[k] - view.times[k]) <= 1e-12);
      CHECK((back.values[k] - view.values[k]).norm() <= 1e-12);
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("csv validation") {
  const std::string path = temp_path("ncdssm_bad.csv");
  auto write_text = [&](const char* text) {
    FILE* f = fopen(path.c_str(), "w");
    fputs(text, f);
    fclose(f);
  };

  SUBCASE("empty cells mark a missing timestep") {
    write_text("t,y1,y2\n0,1.5,2.5\n0.1,,\n0.2,3.5,4.5\n");
    const auto s = dat::read_csv(path);
    REQUIRE(s.size() == 3);
    CHECK(s.observed[0] == 1);
    CHECK(s.observed[1] == 0);
    CHECK(s.observed[2] == 1);
  }
  SUBCASE("rejects a decreasing time column") {
    write_text("t,y1\n0,1\n0.2,2\n0.1,3\n");
    CHECK_THROWS_AS(dat::read_csv(path), DataFormatError);
  }
  SUBCASE("rejects ragged rows") {
    write_text("t,y1,y2\n0,1,2\n0.1,3\n");
    CHECK_THROWS_AS(dat::read_csv(path), DataFormatError);
  }
  SUBCASE("rejects unparseable cells with the line number") {
    write_text("t,y1\n0,1\n0.1,abc\n");
    try {
      dat::read_csv(path);
      FAIL("expected DataFormatError");
    } catch (const DataFormatError& e) {
      CHECK(e.line == 3);
    }
  }
  SUBCASE("rejects partially empty rows") {
    write_text("t,y1,y2\n0,1,\n");
    CHECK_THROWS_AS(dat::read_csv(path), DataFormatError);
  }
  std::remove(path.c_str());
}
