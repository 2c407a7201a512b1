#pragma once

// JSON conversions shared by the checkpoint manifest and the desk config.

#include "genieblue/model.hpp"
#include "genieblue/training.hpp"
#include "json.hpp"

namespace genieblue::json_io {

using Json = nlohmann::ordered_json;

inline Json to_json(const ModelConfig& c) {
  return Json{{"vocab", c.vocab},
              {"width", c.width},
              {"layers", c.layers},
              {"heads", c.heads},
              {"ffn", c.ffn},
              {"max_seq", c.max_seq},
              {"grid_side", c.grid_side},
              {"image_alphabet", c.image_alphabet},
              {"vision_width", c.vision_width},
              {"vision_layers", c.vision_layers},
              {"vision_heads", c.vision_heads},
              {"vision_ffn", c.vision_ffn}};
}

// Missing fields keep the values already in `c`.
inline ModelConfig model_config(const Json& j, ModelConfig c = {}) {
  c.vocab = j.value("vocab", c.vocab);
  c.width = j.value("width", c.width);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.ffn = j.value("ffn", c.ffn);
  c.max_seq = j.value("max_seq", c.max_seq);
  c.grid_side = j.value("grid_side", c.grid_side);
  c.image_alphabet = j.value("image_alphabet", c.image_alphabet);
  c.vision_width = j.value("vision_width", c.vision_width);
  c.vision_layers = j.value("vision_layers", c.vision_layers);
  c.vision_heads = j.value("vision_heads", c.vision_heads);
  c.vision_ffn = j.value("vision_ffn", c.vision_ffn);
  c.validate();
  return c;
}

inline Json to_json(const StageConfig& s) {
  return Json{{"stage", s.stage},
              {"peak_lr", s.peak_lr},
              {"warmup_fraction", s.warmup_fraction},
              {"steps", s.steps},
              {"batch_size", s.batch_size},
              {"weight_decay", s.weight_decay},
              {"accumulation", s.accumulation},
              {"vision_lr_decay", s.vision_lr_decay}};
}

inline StageConfig stage_config(const Json& j, StageConfig s) {
  s.peak_lr = j.value("peak_lr", s.peak_lr);
  s.warmup_fraction = j.value("warmup_fraction", s.warmup_fraction);
  s.steps = j.value("steps", s.steps);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.weight_decay = j.value("weight_decay", s.weight_decay);
  s.accumulation = j.value("accumulation", s.accumulation);
  s.vision_lr_decay = j.value("vision_lr_decay", s.vision_lr_decay);
  return s;
}

}  // namespace genieblue::json_io
