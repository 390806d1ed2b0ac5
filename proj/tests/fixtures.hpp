// SPDX-License-Identifier: Apache-2.0
//
// Pretrained backbone and default datasets shared by the slower tests.  The
// backbone is pretrained once with the default configuration and cached in
// GARA_FIXTURE_DIR; later test binaries load the cached checkpoint.
#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>

#include "gara/analysis.hpp"
#include "gara/config.hpp"
#include "gara/io.hpp"
#include "gara/model.hpp"

#ifndef GARA_FIXTURE_DIR
#define GARA_FIXTURE_DIR "fixtures"
#endif

namespace gara::testing {

struct Fixture {
  ExperimentConfig cfg = default_config();
  ToyBackbone backbone;
  double clean_iou = 0.0;
  Dataset train;
  Dataset test;
  Dataset clean_test;
};

namespace detail {

// Writes to a sibling temp file and renames, so concurrent readers never see a partial file.
inline void publish(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = path.string() + ".tmp" + std::to_string(::getpid());
  io::write_file(tmp, bytes);
  std::filesystem::rename(tmp, path);
}

inline Fixture build_fixture() {
  Fixture f;
  const auto& cfg = f.cfg;
  f.train = make_train_set(cfg.bench);
  f.test = make_test_set(cfg.bench);
  f.clean_test = make_clean_set(cfg.bench, Pool::CleanTest, cfg.bench.clean_test_images);

  const std::filesystem::path dir = GARA_FIXTURE_DIR;
  const auto ckpt = dir / "backbone.ckpt", score = dir / "clean_iou.txt";
  if (std::filesystem::exists(ckpt) && std::filesystem::exists(score)) {
    f.backbone = io::load_backbone(ckpt);
    std::ifstream(score) >> f.clean_iou;
    return f;
  }
  const Dataset clean = make_clean_set(cfg.bench, Pool::CleanTrain, cfg.bench.clean_train_images);
  PretrainResult res = pretrain_backbone(clean, f.clean_test, cfg.backbone, cfg.pretrain);
  f.backbone = std::move(res.backbone);
  f.clean_iou = res.clean_iou;
  std::filesystem::create_directories(dir);
  publish(ckpt, io::encode(f.backbone));
  publish(score, format_real(f.clean_iou) + "\n");
  return f;
}

}  // namespace detail

inline const Fixture& fixture() {
  static const Fixture f = detail::build_fixture();
  return f;
}

}  // namespace gara::testing
