// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <sstream>

#include "kdcal/checkpoint.hpp"
#include "kdcal/error.hpp"
#include "kdcal/train.hpp"
#include "scratch.hpp"

using namespace kdcal;

TEST_SUITE("checkpoint") {
  TEST_CASE("save and load reproduce parameters, normalization and predictions") {
    const Dataset train = make_synthetic(3, 10, {3, 8, 8}, 1);
    const Dataset test = make_synthetic(3, 5, {3, 8, 8}, 2);
    for (Arch a : {Arch::tiny_student, Arch::tiny_teacher, Arch::mlp_probe}) {
      Model m = build_model({a, 3, 0.5, {3, 8, 8}, 6});
      m.set_normalization(compute_normalization(train));
      ScratchDir dir("ckpt");
      save_checkpoint(m, dir / "m.ckpt");
      const Model back = load_checkpoint(dir / "m.ckpt");
      CHECK(back.spec() == m.spec());
      CHECK(back.normalization() == m.normalization());
      REQUIRE(back.parameters().size() == m.parameters().size());
      for (std::size_t i = 0; i < m.parameters().size(); ++i) CHECK(bitwise_equal(back.parameters()[i], m.parameters()[i]));
      const Evaluation e1 = evaluate(m, test);
      const Evaluation e2 = evaluate(back, test);
      CHECK(e1.report.ece == e2.report.ece);
      CHECK(e1.report.oe == e2.report.oe);
      CHECK(e1.predictions.confidences == e2.predictions.confidences);
    }
  }

  TEST_CASE("writing is deterministic") {
    const Model m = build_model({Arch::tiny_student, 10, 1.0, {3, 32, 32}, 1});
    std::ostringstream a, b;
    write_checkpoint(m, a);
    write_checkpoint(m, b);
    CHECK(a.str() == b.str());
    CHECK(a.str().rfind("KDCALCKP", 0) == 0);
  }

  TEST_CASE("corrupt files are rejected") {
    const Model m = build_model({Arch::mlp_probe, 2, 1.0, {1, 4, 4}, 1});
    std::ostringstream good;
    write_checkpoint(m, good);
    const std::string bytes = good.str();

    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    std::istringstream in1(bad_magic);
    CHECK_THROWS_AS(read_checkpoint(in1), FormatError);

    std::string bad_version = bytes;
    bad_version[8] = 99;
    std::istringstream in2(bad_version);
    CHECK_THROWS_AS(read_checkpoint(in2), FormatError);

    std::istringstream in3(bytes.substr(0, bytes.size() - 5));
    CHECK_THROWS_AS(read_checkpoint(in3), FormatError);

    std::istringstream in4(bytes + "x");
    CHECK_THROWS_AS(read_checkpoint(in4), FormatError);

    CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/m.ckpt"), IoError);
  }

  TEST_CASE("spec JSON is strict") {
    nlohmann::json j = to_json(ModelSpec{});
    CHECK(model_spec_from_json(j) == ModelSpec{});
    j["extra"] = 1;
    CHECK_THROWS_AS(model_spec_from_json(j), ConfigError);
  }
}
