#include <lofa/metrics.hpp>
#include <lofa/taskgen.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace lofa {

namespace fs = std::filesystem;

namespace {

struct Candidate {
  std::vector<float> params;
  std::string label;
};

std::vector<float> steps(float lo, float hi, float step) {
  std::vector<float> out;
  const int n = static_cast<int>(std::lround((hi - lo) / step));
  for (int i = 0; i <= n; ++i) out.push_back(lo + step * static_cast<float>(i));
  return out;
}

std::string band(TaskKind kind, const std::string& range) { return std::string(task_kind_name(kind)) + "/" + range; }

void add_range(std::vector<Candidate>& out, TaskKind kind, float lo, float hi, float step) {
  const std::string label = band(kind, "[" + format_number(lo) + "," + format_number(hi) + "]");
  for (float v : steps(lo, hi, step)) out.push_back({{v}, label});
}

// Parameter pools per kind and split. Validation bands sit between (or
// outside) the training bands; spiral and star exist only in validation.
std::vector<Candidate> pool(TaskKind kind, bool val) {
  std::vector<Candidate> out;
  switch (kind) {
    case TaskKind::Rotate:
      if (val) {
        add_range(out, kind, 80, 100, 5);
        add_range(out, kind, 260, 280, 5);
      } else {
        add_range(out, kind, 20, 70, 5);
        add_range(out, kind, 110, 160, 5);
        add_range(out, kind, 200, 250, 5);
        add_range(out, kind, 290, 340, 5);
      }
      break;
    case TaskKind::Scale:
      if (val) {
        add_range(out, kind, 0.8f, 1.0f, 0.05f);
        add_range(out, kind, 1.5f, 1.6f, 0.05f);
      } else {
        add_range(out, kind, 0.5f, 0.7f, 0.05f);
        add_range(out, kind, 1.1f, 1.4f, 0.05f);
        add_range(out, kind, 1.7f, 2.0f, 0.05f);
      }
      break;
    case TaskKind::Translate: {
      auto in_box = [](float dx, float dy, float sx, float sy) {
        return sx * dx >= 0.75f && sx * dx <= 1.75f && sy * dy >= 0.75f && sy * dy <= 1.75f;
      };
      for (float dx : steps(-2.0f, 2.0f, 0.5f)) {
        for (float dy : steps(-2.0f, 2.0f, 0.5f)) {
          if (dx == 0.0f && dy == 0.0f) continue;
          const bool box_a = in_box(dx, dy, 1.0f, -1.0f);
          const bool box_b = in_box(dx, dy, -1.0f, 1.0f);
          if (val && box_a) out.push_back({{dx, dy}, band(kind, "box(+x,-y)")});
          if (val && box_b) out.push_back({{dx, dy}, band(kind, "box(-x,+y)")});
          if (!val && !box_a && !box_b) out.push_back({{dx, dy}, band(kind, "grid")});
        }
      }
      break;
    }
    case TaskKind::Ring:
      if (val) {
        add_range(out, kind, 1.5f, 1.6f, 0.1f);
      } else {
        add_range(out, kind, 0.8f, 1.3f, 0.1f);
        add_range(out, kind, 1.8f, 2.2f, 0.1f);
      }
      break;
    case TaskKind::Moons:
      if (!val) add_range(out, kind, 0.8f, 1.6f, 0.1f);
      break;
    case TaskKind::Spiral:
      if (val) add_range(out, kind, 1.0f, 2.0f, 0.5f);
      break;
    case TaskKind::Star:
      if (val) add_range(out, kind, 4.0f, 6.0f, 1.0f);
      break;
    case TaskKind::Mixture: {
      const std::vector<int> ks = val ? std::vector<int>{5} : std::vector<int>{3, 4, 6};
      const std::vector<float> radii = val ? std::vector<float>{1.25f, 1.75f} : std::vector<float>{1.0f, 1.5f, 2.0f};
      for (int k : ks) {
        for (float r : radii) out.push_back({{static_cast<float>(k), r}, band(kind, "k=" + std::to_string(k))});
      }
      break;
    }
  }
  return out;
}

std::vector<TaskSpec> allocate(const std::vector<TaskKind>& order, int count, bool val, Rng& rng) {
  std::map<TaskKind, std::vector<Candidate>> pools;
  size_t capacity = 0;
  for (TaskKind k : order) {
    auto p = pool(k, val);
    std::shuffle(p.begin(), p.end(), rng);
    capacity += p.size();
    pools.emplace(k, std::move(p));
  }
  if (count < 1 || static_cast<size_t>(count) > capacity) {
    throw std::invalid_argument(std::string("requested ") + std::to_string(count) + (val ? " validation" : " training") +
                                " tasks but the family bands hold " + std::to_string(capacity));
  }
  std::map<TaskKind, size_t> taken;
  std::vector<TaskSpec> out;
  while (static_cast<int>(out.size()) < count) {
    for (TaskKind k : order) {
      if (static_cast<int>(out.size()) == count) break;
      auto& p = pools[k];
      size_t& used = taken[k];
      if (used >= p.size()) continue;
      const Candidate& c = p[used++];
      TaskSpec t;
      t.kind = k;
      t.params = c.params;
      t.family_label = c.label;
      t.split = val ? "val" : "train";
      t.prompt_text = make_prompt(k, c.params);
      out.push_back(std::move(t));
    }
  }
  // Stable presentation order: by kind, then parameters.
  std::stable_sort(out.begin(), out.end(), [](const TaskSpec& a, const TaskSpec& b) {
    if (a.kind != b.kind) return static_cast<int>(a.kind) < static_cast<int>(b.kind);
    return a.params < b.params;
  });
  std::map<TaskKind, int> serial;
  for (TaskSpec& t : out) {
    const int idx = serial[t.kind]++;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%02d", idx);
    t.task_id = t.split + "-" + task_kind_name(t.kind) + "-" + buf;
  }
  return out;
}

}  // namespace

TaskSplit make_task_families(uint64_t seed, int n_train_tasks, int n_val_tasks) {
  Rng rng(seed);
  TaskSplit out;
  out.train = allocate({TaskKind::Rotate, TaskKind::Translate, TaskKind::Scale, TaskKind::Mixture, TaskKind::Ring,
                        TaskKind::Moons},
                       n_train_tasks, false, rng);
  out.val = allocate({TaskKind::Spiral, TaskKind::Star, TaskKind::Rotate, TaskKind::Scale, TaskKind::Translate,
                      TaskKind::Ring, TaskKind::Mixture},
                     n_val_tasks, true, rng);
  uint64_t s = seed * 1000;
  for (auto* list : {&out.train, &out.val}) {
    for (TaskSpec& t : *list) t.seed = s++;
  }
  return out;
}

LoraBank build_pairs(const BaseModel& base, const TaskSplit& tasks, const BankBuildOptions& opt) {
  LoraBank bank;
  bank.rank = opt.lora.rank;
  bank.base_fingerprint = base.fingerprint();
  for (const auto* list : {&tasks.train, &tasks.val}) {
    for (const TaskSpec& task : *list) {
      LoraAdapter a = finetune_lora(base, task, opt.lora);
      BankRecord r;
      r.split = task.split;
      r.family = task.family_label;
      const Mat gen = sample(base, opt.quality_points, opt.quality_steps, &a, opt.quality_seed);
      Rng trng(opt.quality_seed + 1);
      const Mat target = task.sample(trng, opt.quality_points);
      r.quality_energy = static_cast<float>(energy_distance(gen, target));
      r.quality_passed = r.quality_energy <= opt.reject_energy;
      bank.adapters.push_back(std::move(a));
      bank.records.push_back(std::move(r));
    }
  }
  bank.validate();
  return bank;
}

void save_tasks(const TaskSplit& tasks, const fs::path& file) {
  json list = json::array();
  for (const auto* l : {&tasks.train, &tasks.val}) {
    for (const TaskSpec& t : *l) list.push_back(to_json(t));
  }
  write_text_file(file, json{{"format", "lofa-tasks"}, {"version", 1}, {"tasks", list}}.dump(2) + "\n");
}

TaskSplit load_tasks(const fs::path& file) {
  if (!fs::exists(file)) throw MissingArtifactError("no task manifest at " + file.string());
  const json j = json::parse(read_text_file(file));
  TaskSplit out;
  for (const auto& e : j.at("tasks")) {
    TaskSpec t = task_from_json(e);
    (t.split == "val" ? out.val : out.train).push_back(std::move(t));
  }
  return out;
}

const TaskSpec* find_task(const TaskSplit& tasks, const std::string& task_id) {
  for (const auto* l : {&tasks.train, &tasks.val}) {
    for (const TaskSpec& t : *l) {
      if (t.task_id == task_id) return &t;
    }
  }
  return nullptr;
}

}  // namespace lofa
