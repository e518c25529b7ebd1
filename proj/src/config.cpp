#include "mmoe/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "mmoe/error.hpp"

namespace mmoe {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

long parse_int(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  long v = 0;
  try {
    v = std::stol(value, &pos);
  } catch (const std::exception&) {
    throw ConfigError("key `" + key + "`: expected an integer, got `" + value + "`");
  }
  if (pos != value.size()) {
    throw ConfigError("key `" + key + "`: expected an integer, got `" + value + "`");
  }
  return v;
}

double parse_real(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    throw ConfigError("key `" + key + "`: expected a number, got `" + value + "`");
  }
  if (pos != value.size()) {
    throw ConfigError("key `" + key + "`: expected a number, got `" + value + "`");
  }
  return v;
}

// "8x3,16x3" -> {(8,3),(16,3)}
std::vector<std::pair<int, int>> parse_conv_blocks(const std::string& value) {
  std::vector<std::pair<int, int>> blocks;
  std::istringstream in(value);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    const auto x = item.find('x');
    if (x == std::string::npos) {
      throw ConfigError("conv_blocks: expected `<channels>x<kernel>`, got `" + item + "`");
    }
    blocks.emplace_back(static_cast<int>(parse_int("conv_blocks", item.substr(0, x))),
                        static_cast<int>(parse_int("conv_blocks", item.substr(x + 1))));
  }
  if (blocks.empty()) throw ConfigError("conv_blocks: no blocks given");
  return blocks;
}

void require_file(const std::string& what, const std::string& path) {
  if (path.empty()) throw ConfigError("missing required config key: " + what);
  if (!std::filesystem::exists(path)) {
    throw ConfigError(what + ": file does not exist: " + path);
  }
}

}  // namespace

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);

  RunConfig cfg;
  std::string section;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError(path + ":" + std::to_string(line_no) + ": malformed section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected `key = value`");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::string qual = section + "." + key;

    if (qual == "data.train_images") cfg.train_images = value;
    else if (qual == "data.train_labels") cfg.train_labels = value;
    else if (qual == "data.test_images") cfg.test_images = value;
    else if (qual == "data.test_labels") cfg.test_labels = value;
    else if (qual == "data.superclass_map") cfg.superclass_map = value;
    else if (qual == "architecture.conv_blocks") cfg.conv_blocks = parse_conv_blocks(value);
    else if (qual == "architecture.fc_hidden") cfg.fc_hidden = static_cast<int>(parse_int(qual, value));
    else if (qual == "architecture.expert_fc_width") cfg.expert_fc_width = static_cast<int>(parse_int(qual, value));
    else if (qual == "architecture.mediator_fc_width") cfg.mediator_fc_width = static_cast<int>(parse_int(qual, value));
    else if (qual == "architecture.shared_prefix") cfg.shared_prefix = static_cast<int>(parse_int(qual, value));
    else if (qual == "architecture.confidence_attach") cfg.confidence_attach = static_cast<int>(parse_int(qual, value));
    else if (qual == "training.epochs") cfg.training.epochs = static_cast<int>(parse_int(qual, value));
    else if (qual == "training.batch") cfg.training.batch_size = static_cast<int>(parse_int(qual, value));
    else if (qual == "training.lr") cfg.training.lr = parse_real(qual, value);
    else if (qual == "training.momentum") cfg.training.momentum = parse_real(qual, value);
    else if (qual == "training.weight_decay") cfg.training.weight_decay = parse_real(qual, value);
    else if (qual == "training.confidence_finetune_epochs") cfg.training.confidence_finetune_epochs = static_cast<int>(parse_int(qual, value));
    else if (qual == "training.mediator_finetune_epochs") cfg.training.mediator_finetune_epochs = static_cast<int>(parse_int(qual, value));
    else if (qual == "gating.threshold") cfg.gating.threshold = parse_real(qual, value);
    else if (qual == "gating.mediator_weight") cfg.gating.mediator_weight = parse_real(qual, value);
    else if (qual == "run.seed") cfg.seed = static_cast<std::uint64_t>(parse_int(qual, value));
    else if (qual == "run.out") cfg.out_dir = value;
    else if (qual == "increment.images") cfg.increment_images = value;
    else if (qual == "increment.labels") cfg.increment_labels = value;
    else if (qual == "increment.map") cfg.increment_map = value;
    else {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": unknown key `" + qual + "`");
    }
  }
  return cfg;
}

void RunConfig::validate(bool need_increment) const {
  require_file("data.train_images", train_images);
  require_file("data.train_labels", train_labels);
  require_file("data.test_images", test_images);
  require_file("data.test_labels", test_labels);
  require_file("data.superclass_map", superclass_map);
  if (need_increment) {
    if (!increment_images || !increment_labels || !increment_map) {
      throw ConfigError("add-expert requires an [increment] section with images, labels and map");
    }
    require_file("increment.images", *increment_images);
    require_file("increment.labels", *increment_labels);
    require_file("increment.map", *increment_map);
  }
  training.validate();
  gating.validate();
  for (const auto& [ch, k] : conv_blocks) {
    if (ch < 1 || k < 1) throw ConfigError("conv_blocks: channels and kernel must be positive");
  }
  if (out_dir.empty()) throw ConfigError("run.out must not be empty");
}

EnsembleConfig RunConfig::ensemble_config(const std::vector<int>& input_shape) const {
  EnsembleConfig ec;
  ec.trunk = make_conv_trunk(conv_blocks, input_shape.at(0));
  ec.n_fc_hidden = fc_hidden;
  ec.expert_fc_width = expert_fc_width;
  ec.mediator_fc_width = mediator_fc_width;
  ec.shared_prefix_convs = shared_prefix;
  ec.confidence_attach_conv = confidence_attach;
  ec.input_shape = input_shape;
  ec.validate();
  return ec;
}

}  // namespace mmoe
