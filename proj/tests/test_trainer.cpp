#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "mshubert/audio.hpp"
#include "mshubert/binary_io.hpp"
#include "mshubert/checkpoint.hpp"
#include "mshubert/config.hpp"
#include "mshubert/data.hpp"
#include "mshubert/labeler.hpp"
#include "mshubert/trainer.hpp"

using namespace mshubert;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mshubert_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Synthetic utterances labelled by k-means over standardised filterbank frames.
std::vector<Utterance> labelled_synth(const RunConfig& cfg, std::size_t n, std::uint64_t seed) {
  SynthOptions so;
  so.n_utts = n;
  so.seed = seed;
  const auto utts = synth_dataset(so);
  std::vector<double> values;
  std::vector<std::size_t> frames;
  for (const auto& u : utts) {
    const auto f = filterbank(u.audio, cfg.model);
    values.insert(values.end(), f.data().begin(), f.data().end());
    frames.push_back(f.dim(0));
  }
  const std::size_t bands = FilterbankOptions{}.bands;
  standardize_columns(values, bands);
  const auto feats = Tensor::from({values.size() / bands, bands}, values);
  const auto h = build_hierarchy(feats, cfg.cluster_sizes, seed);
  const auto sets = split_labels(assign_labels(feats, h), frames);
  std::vector<Utterance> out;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    UtteranceLabels labels;
    for (const auto& s : sets) labels.push_back(s[i]);
    out.push_back({utts[i].id, utts[i].audio, labels});
  }
  return out;
}

RunConfig small_config(std::size_t steps) {
  RunConfig c;
  c.optimizer.total_steps = steps;
  c.data.batch_seconds = 0.25;
  c.data.valid_fraction = 0.0;
  return c;
}

std::vector<std::vector<double>> params_of(const Model& m) {
  std::vector<std::vector<double>> out;
  for (const auto& p : m.parameters()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

}  // namespace

TEST_CASE("config text round trip, overrides and validation") {
  auto c = RunConfig::desk();
  c.set("objective.mode", "m_hubert");
  c.set_override("optimizer.lr=2.5e-4");
  c.set("data.manifest", "corpus/manifest.tsv");
  const auto text = c.to_text();
  const auto back = RunConfig::parse(text);
  CHECK(back.to_text() == text);
  CHECK(back.mode == TrainMode::m_hubert);
  CHECK(back.optimizer.lr == 2.5e-4);
  CHECK(back.data.manifest == "corpus/manifest.tsv");

  // doubles survive exactly
  c.optimizer.lr = 0.1 + 0.2;
  CHECK(RunConfig::parse(c.to_text()).optimizer.lr == c.optimizer.lr);

  CHECK_THROWS_AS(RunConfig::parse("[model]\nwidth = 3\n"), ValidationError);
  CHECK_THROWS_AS(RunConfig::parse("[trainer]\nlr = 3\n"), ValidationError);
  CHECK_THROWS_AS(RunConfig::parse("lr = 3\n"), ValidationError);
  CHECK_THROWS_AS(RunConfig::parse("[optimizer]\nlr = fast\n"), ValidationError);
  CHECK_THROWS_AS(RunConfig::parse("[model]\nn_layers = 2\npreset = desk\n"), ValidationError);
  CHECK_THROWS_AS(c.set("nodot", "1"), ValidationError);

  const auto p = RunConfig::parse("[model]\npreset = paper_base\nseed = 4\n");
  CHECK(p.model.n_layers == 12);
  CHECK(p.model.hidden_dim == 768);
  CHECK(p.model.seed == 4);

  auto s = RunConfig::desk();
  s.mode = TrainMode::s_hubert;
  CHECK_THROWS_AS(s.validate(), ValidationError);  // three codebooks configured
  s.cluster_sizes = {16};
  s.drop = 0;
  CHECK_NOTHROW(s.validate());
  s.drop = 1;
  CHECK_THROWS_AS(s.validate(), ValidationError);

  auto e = RunConfig::desk();
  e.optimizer.total_steps = 1;  // warmup rounds to 0, total must still exceed it
  CHECK_NOTHROW(e.validate());
  e.optimizer.warmup_frac = 0.5;
  e.optimizer.total_steps = 1;  // one warmup step leaves nothing to decay over
  CHECK_THROWS_AS(e.validate(), ValidationError);
}

TEST_CASE("assignment text in the config") {
  auto c = RunConfig::desk();
  const auto a = c.assignment();
  REQUIRE(a.pairs.size() == 3);
  CHECK(a.to_string(c.cluster_sizes) == "4:16, 3:8, 1:4; drop = 1");

  c.assignment_text = "4:16, 2:8, 1:4; drop = 2";
  CHECK(c.assignment().drop == 2);
  CHECK(c.assignment().pairs[1].layer == 2);
  CHECK(RunConfig::parse(c.to_text()).assignment().to_string(c.cluster_sizes) == "4:16, 2:8, 1:4; drop = 2");

  c.assignment_text = "4:4, 3:8, 1:16";
  CHECK_THROWS_AS(c.validate(), ValidationError);  // coarse on deep layer
  c.reverse_assignment = true;
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("learning rate schedule") {
  OptimizerConfig o;
  o.lr = 1.0;
  o.total_steps = 100;
  o.warmup_frac = 0.08;
  CHECK(o.warmup_steps() == 8);
  CHECK(o.lr_at(1) == doctest::Approx(1.0 / 8));
  CHECK(o.lr_at(8) == 1.0);
  CHECK(o.lr_at(54) == doctest::Approx(46.0 / 92));
  CHECK(o.lr_at(100) == 0.0);
}

TEST_CASE("manifest loading and label validation") {
  const auto dir = scratch("manifest");
  {
    std::ofstream(dir / "empty.tsv") << "";
    CHECK(load_manifest((dir / "empty.tsv").string()).empty());
    auto cfg = RunConfig::desk();
    cfg.data.manifest = (dir / "empty.tsv").string();
    cfg.data.label_dir = (dir / "labels").string();
    CHECK_THROWS_AS(pretrain(cfg), ValidationError);
  }
  {
    std::vector<double> one_second(16000);
    for (std::size_t i = 0; i < one_second.size(); ++i) one_second[i] = 0.3 * std::sin(0.01 * static_cast<double>(i));
    write_wav((dir / "a.wav").string(), one_second, 16000);
    std::ofstream(dir / "one.tsv") << "utt_a\ta.wav\t16000\n";
    const auto m = load_manifest((dir / "one.tsv").string());
    REQUIRE(m.entries.size() == 1);
    CHECK(m.entries[0].id == "utt_a");
    CHECK(m.entries[0].samples == 16000);
    const auto audio = load_audio(m, 16000);
    REQUIRE(audio[0].size() == 16000);
    CHECK(audio[0][100] == quantize_pcm16(0.3 * std::sin(1.0)));
    CHECK_THROWS_AS(load_audio(m, 8000), ValidationError);
  }
  {
    std::ofstream(dir / "bad.tsv") << "x\ta.wav\n";
    CHECK_THROWS_AS(load_manifest((dir / "bad.tsv").string()), ValidationError);
    std::ofstream(dir / "dup.tsv") << "x\ta.wav\t1\nx\ta.wav\t1\n";
    CHECK_THROWS_AS(load_manifest((dir / "dup.tsv").string()), ValidationError);
  }
  {
    // label count off by one for the second utterance
    const auto cfg = ModelConfig::desk();
    std::ofstream(dir / "two.tsv") << "u0\ta.wav\t800\nu1\ta.wav\t400\n";
    const auto m = load_manifest((dir / "two.tsv").string());
    const auto t0 = cfg.frames_for(800), t1 = cfg.frames_for(400);
    fs::create_directories(dir / "labels");
    write_label_file(label_file_path((dir / "labels").string(), 0),
                     {std::vector<int>(t0, 1), std::vector<int>(t1 + 1, 0)});
    const std::vector<std::size_t> sizes{4};
    try {
      load_labels(m, (dir / "labels").string(), sizes, cfg);
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("u1") != std::string::npos);
    }
    write_label_file(label_file_path((dir / "labels").string(), 0), {std::vector<int>(t0, 1), std::vector<int>(t1, 4)});
    CHECK_THROWS_AS(load_labels(m, (dir / "labels").string(), sizes, cfg), ValidationError);
    write_label_file(label_file_path((dir / "labels").string(), 0), {std::vector<int>(t0, 1), std::vector<int>(t1, 3)});
    CHECK(load_labels(m, (dir / "labels").string(), sizes, cfg)[1][0].size() == t1);
  }
}

TEST_CASE("synthetic corpus") {
  SynthOptions so;
  so.n_utts = 5;
  so.seed = 9;
  const auto a = synth_dataset(so), b = synth_dataset(so);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].audio == b[i].audio);
    CHECK(a[i].sample_states == b[i].sample_states);
  }
  so.n_states = 1;
  for (const auto& u : synth_dataset(so)) {
    const auto fs = frame_states(u.sample_states, ModelConfig::desk());
    CHECK(std::set<int>(fs.begin(), fs.end()) == std::set<int>{0});
  }

  const auto dir = scratch("synth");
  so.n_states = 4;
  const auto corpus = write_synth_corpus(dir.string(), so, ModelConfig::desk());
  CHECK(corpus.manifest.entries.size() == 5);
  const auto audio = load_audio(corpus.manifest, so.sample_rate);
  const auto fresh = synth_dataset(so);
  for (std::size_t i = 0; i < fresh.size(); ++i) CHECK(audio[i] == fresh[i].audio);  // already on the int16 grid
  const auto states = read_label_file(corpus.states_path);
  CHECK(states[2] == frame_states(fresh[2].sample_states, ModelConfig::desk()));
}

TEST_CASE("batches cover every utterance once") {
  std::vector<std::size_t> lengths;
  for (std::size_t i = 0; i < 37; ++i) lengths.push_back(400 + 17 * i % 500);
  Rng r1(3), r2(3);
  const auto b1 = make_batches(lengths, 2000, r1);
  CHECK(b1 == make_batches(lengths, 2000, r2));
  std::multiset<std::size_t> seen;
  for (const auto& b : b1) {
    std::size_t total = 0;
    for (const auto i : b) {
      seen.insert(i);
      total += lengths[i];
    }
    CHECK((b.size() == 1 || total <= 2000));
  }
  CHECK(seen.size() == lengths.size());
  CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == lengths.size());
  // an utterance longer than the budget still gets its own batch
  Rng r3(1);
  const std::vector<std::size_t> big{5000, 10};
  CHECK(make_batches(big, 100, r3).size() == 2);
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  auto cfg = small_config(3);
  cfg.optimizer.lr = 0.0;
  Trainer t(cfg, labelled_synth(cfg, 6, 2));
  const auto before = params_of(t.model());
  while (!t.done()) {
    const auto m = t.step();
    CHECK(m.grad_norm > 0.0);
    CHECK(m.lr == 0.0);
  }
  CHECK(params_of(t.model()) == before);
}

TEST_CASE("determinism, checkpoint format and continuation") {
  auto cfg = small_config(6);
  cfg.data.valid_fraction = 0.2;
  const auto data = labelled_synth(cfg, 10, 4);
  auto [train, valid] = split_train_valid(data, cfg.data.valid_fraction);
  CHECK(valid.size() == 2);

  Trainer a(cfg, train, valid), b(cfg, train, valid);
  std::vector<std::string> sa, sb;
  while (!a.done()) sa.push_back(a.step().to_json(false));
  while (!b.done()) sb.push_back(b.step().to_json(false));
  CHECK(sa == sb);
  CHECK(a.validation_loss() == b.validation_loss());
  CHECK(a.validation_loss() == a.validation_loss());

  // save -> load -> save is byte-identical
  const auto bytes = checkpoint_bytes(a.checkpoint());
  const auto again = checkpoint_bytes(parse_checkpoint(bytes));
  CHECK(bytes == again);
  CHECK(bytes == checkpoint_bytes(b.checkpoint()));

  const auto dir = scratch("ckpt");
  const auto path = (dir / "a.ckpt").string();
  save_checkpoint(path, a.checkpoint());
  CHECK(read_file_bytes(path) == bytes);
  auto cut = bytes;
  cut.resize(cut.size() / 2);
  write_file_bytes((dir / "cut.ckpt").string(), cut);
  CHECK_THROWS_AS(load_checkpoint((dir / "cut.ckpt").string()), FormatError);
  auto flipped = bytes;
  flipped[flipped.size() / 3] ^= 0x10;
  CHECK_THROWS_AS(parse_checkpoint(flipped), FormatError);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(parse_checkpoint(magic), FormatError);

  // fp32 payloads load too, rounded
  const auto lossy = parse_checkpoint(checkpoint_bytes(a.checkpoint(), PayloadType::fp32));
  const auto& w = lossy.tensors.front();
  CHECK(w.values[0] == static_cast<double>(static_cast<float>(a.model().parameters().front().tensor.at(0))));

  // continuation: 3 steps, checkpoint through bytes, 3 more == 6 straight
  Trainer first(cfg, train, valid);
  std::vector<std::string> split_stream;
  for (int i = 0; i < 3; ++i) split_stream.push_back(first.step().to_json(false));
  const auto mid = parse_checkpoint(checkpoint_bytes(first.checkpoint()));
  CHECK(mid.state.step == 3);
  Trainer resumed(mid, train, valid);
  while (!resumed.done()) split_stream.push_back(resumed.step().to_json(false));
  CHECK(split_stream == sa);
  CHECK(params_of(resumed.model()) == params_of(a.model()));
  CHECK(checkpoint_bytes(resumed.checkpoint()) == bytes);

  const auto model = model_from_checkpoint(mid);
  CHECK(params_of(model) == params_of(first.model()));
}

TEST_CASE("mode instrumentation") {
  const auto base = small_config(4);
  const auto data = labelled_synth(base, 6, 5);

  auto ms = base;
  Trainer tm(ms, data);
  for (int i = 0; i < 4; ++i) {
    const auto m = tm.step();
    CHECK(m.swap_invocations == base.model.n_layers);
    CHECK(m.mpl_terms == 2);
  }

  auto mh = base;
  mh.mode = TrainMode::m_hubert;
  Trainer th(mh, data);
  for (int i = 0; i < 4; ++i) CHECK(th.step().swap_invocations == 0);

  auto sh = base;
  sh.mode = TrainMode::s_hubert;
  sh.cluster_sizes = {16};
  sh.drop = 0;
  std::vector<Utterance> single = data;
  for (auto& u : single) u.labels.resize(1);
  Trainer ts(sh, single);
  for (int i = 0; i < 4; ++i) {
    const auto m = ts.step();
    CHECK(m.mpl_terms == 1);
    CHECK(m.swap_invocations == base.model.n_layers);
  }
  CHECK_THROWS_AS(Trainer(sh, data), ValidationError);  // label sets do not match the codebooks
}

TEST_CASE("every parameter receives gradient within 100 steps") {
  auto cfg = small_config(100);
  cfg.data.batch_seconds = 0.15;
  Trainer t(cfg, labelled_synth(cfg, 8, 6));
  std::vector<bool> touched(t.model().parameters().size(), false);
  t.gradient_probe = [&](const Model& m) {
    const auto& ps = m.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i)
      for (const double g : ps[i].tensor.grad())
        if (g != 0.0) {
          touched[i] = true;
          break;
        }
  };
  while (!t.done()) t.step();
  for (std::size_t i = 0; i < touched.size(); ++i) {
    INFO(t.model().parameters()[i].name);
    CHECK(touched[i]);
  }
}

TEST_CASE("non-finite values abort the step") {
  auto cfg = small_config(2);
  Trainer t(cfg, labelled_synth(cfg, 4, 7));
  const auto dir = scratch("diag");
  t.diagnostic_path = (dir / "diag.json").string();
  t.model().parameter("encoder.layers.0.fc1.weight").mutable_data()[0] = NAN;
  CHECK_THROWS_AS(t.step(), NumericError);
  CHECK(fs::exists(t.diagnostic_path));
}

TEST_CASE("label disagreement") {
  const LabelSet a{{0, 0, 1, 1}, {2, 2}};
  CHECK(label_disagreement(a, {{5, 5, 3, 3}, {7, 7}}) == 0.0);  // pure relabelling
  CHECK(label_disagreement(a, {{0, 0, 0, 0}, {0, 0}}) == doctest::Approx(4.0 / 6.0));
  CHECK(label_disagreement(a, {{0, 1, 1, 1}, {2, 2}}) == doctest::Approx(1.0 / 6.0));
  CHECK_THROWS_AS(label_disagreement(a, {{0}}), DimensionError);
}

TEST_CASE("two iterations on disk") {
  const auto dir = scratch("iter");
  SynthOptions so;
  so.n_utts = 16;
  so.seed = 12;
  auto cfg = small_config(20);
  write_synth_corpus((dir / "corpus").string(), so, cfg.model);
  cfg.data.manifest = (dir / "corpus" / "manifest.tsv").string();
  cfg.data.label_dir = (dir / "it1").string();
  cfg.data.checkpoint = (dir / "it1.ckpt").string();
  cfg.data.log = (dir / "it1.jsonl").string();
  cfg.data.valid_fraction = 0.125;
  cfg.data.valid_every = 10;

  CHECK_THROWS_AS(run_iteration(2, cfg, (dir / "missing.ckpt").string()), ValidationError);

  const auto it1 = run_iteration(1, cfg);
  CHECK(it1.labels.consistency.ok());
  CHECK(it1.training.metrics.size() == 20);
  CHECK(it1.training.validation.size() == 2);
  CHECK(fs::exists(cfg.data.checkpoint));
  CHECK(fs::exists(cfg.data.checkpoint + ".best"));
  {
    std::ifstream log(cfg.data.log);
    std::size_t lines = 0;
    for (std::string l; std::getline(log, l);) ++lines;
    CHECK(lines == 22);
  }

  auto cfg2 = cfg;
  cfg2.data.label_dir = (dir / "it2").string();
  cfg2.data.checkpoint = (dir / "it2.ckpt").string();
  cfg2.data.log = (dir / "it2.jsonl").string();
  cfg2.data.relabel_layer = 3;
  const auto it2 = run_iteration(2, cfg2, cfg.data.checkpoint, cfg.data.label_dir);
  CHECK(it2.labels.consistency.ok());
  CHECK(it2.labels.consistency.frames > 0);
  REQUIRE(it2.disagreement.has_value());
  CHECK(*it2.disagreement > 0.01);

  // the same relabel twice gives byte-identical files
  relabel_corpus(cfg2, cfg.data.checkpoint, 3, (dir / "again").string());
  for (std::size_t j = 0; j < cfg.cluster_sizes.size(); ++j)
    CHECK(read_file_bytes(label_file_path((dir / "again").string(), j)) ==
          read_file_bytes(label_file_path(cfg2.data.label_dir, j)));
  CHECK_THROWS_AS(relabel_corpus(cfg2, cfg.data.checkpoint, 5), ValidationError);

  CHECK(load_checkpoint(cfg.data.checkpoint).state.step == 20);
}
