// Copyright 2026 The ctxdetox Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// JSON-lines corpus files.
//
// A corpus directory holds one file per split (<split>.jsonl). Each file
// starts with a header object carrying the vocabulary, the lexicon
// partition and the generating config; every following line is one example:
//   {"c":[...],"r":[...],"t_c":0|1,"t_r":0|1,"s_r":0|1|null,"stance4":"..."}

#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ctxdetox/corpus/generate.hpp"

namespace ctxdetox::corpus {

using ojson = nlohmann::ordered_json;

inline ojson to_json(const LexiconSizes& s) {
  return ojson{{"topic", s.topic}, {"marked", s.marked}, {"support", s.support},
               {"deny", s.deny}, {"filler", s.filler}};
}

inline LexiconSizes lexicon_sizes_from_json(const ojson& j) {
  LexiconSizes s;
  s.topic = j.at("topic").get<int>();
  s.marked = j.at("marked").get<int>();
  s.support = j.at("support").get<int>();
  s.deny = j.at("deny").get<int>();
  s.filler = j.at("filler").get<int>();
  return s;
}

inline ojson to_json(const CorpusConfig& c) {
  return ojson{{"n_train_prefix", c.n_train_prefix},
               {"n_train_classifier", c.n_train_classifier},
               {"n_dev", c.n_dev},
               {"n_test", c.n_test},
               {"case_mix", c.case_mix},
               {"p_marked_context", c.p_marked_context},
               {"p_toxic_response", c.p_toxic_response},
               {"p_echo_support", c.p_echo_support},
               {"sycophancy_rate", c.sycophancy_rate},
               {"heldout_marked_fraction", c.heldout_marked_fraction},
               {"unmarked_stance_mix", c.unmarked_stance_mix},
               {"marked_nonsupport_mix", c.marked_nonsupport_mix},
               {"lexicon", to_json(c.lexicon)},
               {"context_len", {c.context_min_len, c.context_max_len}},
               {"response_len", {c.response_min_len, c.response_max_len}},
               {"seed", c.seed}};
}

inline CorpusConfig corpus_config_from_json(const ojson& j) {
  CorpusConfig c;
  c.n_train_prefix = j.at("n_train_prefix").get<int>();
  c.n_train_classifier = j.at("n_train_classifier").get<int>();
  c.n_dev = j.at("n_dev").get<int>();
  c.n_test = j.at("n_test").get<int>();
  c.case_mix = j.at("case_mix").get<std::array<double, 4>>();
  c.p_marked_context = j.at("p_marked_context").get<double>();
  c.p_toxic_response = j.at("p_toxic_response").get<double>();
  c.p_echo_support = j.at("p_echo_support").get<double>();
  c.sycophancy_rate = j.at("sycophancy_rate").get<double>();
  c.heldout_marked_fraction = j.at("heldout_marked_fraction").get<double>();
  c.unmarked_stance_mix = j.at("unmarked_stance_mix").get<StanceMix>();
  c.marked_nonsupport_mix = j.at("marked_nonsupport_mix").get<std::array<double, 3>>();
  c.lexicon = lexicon_sizes_from_json(j.at("lexicon"));
  c.context_min_len = j.at("context_len").at(0).get<int>();
  c.context_max_len = j.at("context_len").at(1).get<int>();
  c.response_min_len = j.at("response_len").at(0).get<int>();
  c.response_max_len = j.at("response_len").at(1).get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline ojson to_json(const Vocab& v) {
  return ojson{{"tokens", v.tokens},
               {"special",
                {{"pad", Vocab::kPad},
                 {"bos", Vocab::kBos},
                 {"eos", Vocab::kEos},
                 {"sep", Vocab::kSep},
                 {"readout", Vocab::kReadout}}},
               {"topic", v.topic},
               {"train_marked", v.train_marked},
               {"heldout_marked", v.heldout_marked},
               {"support", v.support},
               {"deny", v.deny},
               {"query_marker", v.query_marker},
               {"filler", v.filler}};
}

inline Vocab vocab_from_json(const ojson& j) {
  Vocab v;
  v.tokens = j.at("tokens").get<std::vector<std::string>>();
  const auto& sp = j.at("special");
  require(sp.at("pad") == Vocab::kPad && sp.at("bos") == Vocab::kBos && sp.at("eos") == Vocab::kEos &&
              sp.at("sep") == Vocab::kSep && sp.at("readout") == Vocab::kReadout,
          "vocab header: unexpected special token ids");
  v.topic = j.at("topic").get<std::vector<int>>();
  v.train_marked = j.at("train_marked").get<std::vector<int>>();
  v.heldout_marked = j.at("heldout_marked").get<std::vector<int>>();
  v.support = j.at("support").get<std::vector<int>>();
  v.deny = j.at("deny").get<std::vector<int>>();
  v.query_marker = j.at("query_marker").get<int>();
  v.filler = j.at("filler").get<std::vector<int>>();
  v.finalize();
  return v;
}

inline ojson to_json(const DialogueExample& ex) {
  ojson j{{"c", ex.c}, {"r", ex.r}, {"t_c", ex.t_c}, {"t_r", ex.t_r}};
  j["s_r"] = ex.s_r ? ojson(*ex.s_r) : ojson(nullptr);
  j["stance4"] = std::string(stance_name(ex.stance4));
  return j;
}

inline int binary_field(const ojson& j, const char* name) {
  require(j.contains(name), "missing field '", name, "'");
  const int v = j.at(name).get<int>();
  require(v == 0 || v == 1, "field '", name, "' must be 0 or 1");
  return v;
}

inline DialogueExample example_from_json(const ojson& j, const Vocab& vocab) {
  DialogueExample ex;
  require(j.contains("c") && j.contains("r"), "missing field 'c' or 'r'");
  ex.c = j.at("c").get<TokenSeq>();
  ex.r = j.at("r").get<TokenSeq>();
  vocab.check_sequence(ex.c);
  vocab.check_sequence(ex.r);
  ex.t_c = binary_field(j, "t_c");
  ex.t_r = binary_field(j, "t_r");
  require(j.contains("s_r"), "missing field 's_r'");
  if (!j.at("s_r").is_null()) {
    const int s = j.at("s_r").get<int>();
    require(s == 0 || s == 1, "field 's_r' must be 0, 1 or null");
    ex.s_r = s;
  }
  require(j.contains("stance4"), "missing field 'stance4'");
  ex.stance4 = parse_stance(j.at("stance4").get<std::string>());
  return ex;
}

inline ojson split_header(const Corpus& corpus, SplitId split) {
  return ojson{{"format", "ctxdetox-corpus/1"},
               {"split", split_name(split)},
               {"count", corpus.split(split).size()},
               {"vocab_size", corpus.vocab.size()},
               {"vocab", to_json(corpus.vocab)},
               {"config", to_json(corpus.config)}};
}

inline std::filesystem::path split_path(const std::filesystem::path& dir, SplitId s) {
  return dir / (split_name(s) + ".jsonl");
}

inline void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (SplitId s : kAllSplits) {
    std::ofstream out(split_path(dir, s), std::ios::binary | std::ios::trunc);
    require(out.good(), "cannot open ", split_path(dir, s).string(), " for writing");
    out << split_header(corpus, s).dump() << '\n';
    for (const auto& ex : corpus.split(s)) out << to_json(ex).dump() << '\n';
    require(out.good(), "write failed for ", split_path(dir, s).string());
  }
}

/// Parses one split file. With `have_vocab`, the header vocab must equal
/// `vocab`; otherwise `vocab` and `config` are filled from the header.
inline std::vector<DialogueExample> read_split(const std::filesystem::path& path, Vocab& vocab,
                                               CorpusConfig& config, bool have_vocab) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open corpus file ", path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), path.string(), ": missing header line");
  ojson header;
  try {
    header = ojson::parse(line);
  } catch (const std::exception& e) {
    fail(path.string(), ":1: malformed header: ", e.what());
  }
  Vocab file_vocab;
  CorpusConfig file_config;
  try {
    file_vocab = vocab_from_json(header.at("vocab"));
    file_config = corpus_config_from_json(header.at("config"));
    require(header.at("vocab_size").get<int>() == file_vocab.size(),
            "vocab_size disagrees with token list");
  } catch (const Error& e) {
    fail(path.string(), ":1: bad header: ", e.what());
  } catch (const std::exception& e) {
    fail(path.string(), ":1: bad header: ", e.what());
  }
  if (have_vocab) {
    require(file_vocab == vocab, path.string(), ": vocabulary header mismatch");
  } else {
    vocab = file_vocab;
    config = file_config;
  }
  std::vector<DialogueExample> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(example_from_json(ojson::parse(line), vocab));
    } catch (const std::exception& e) {
      fail(path.string(), ":", lineno, ": malformed record: ", e.what());
    }
  }
  const auto count = header.value("count", static_cast<std::size_t>(out.size()));
  require(count == out.size(), path.string(), ": header count ", count, " but ", out.size(),
          " records");
  return out;
}

inline Corpus read_corpus(const std::filesystem::path& dir) {
  Corpus corpus;
  bool have = false;
  for (SplitId s : kAllSplits) {
    corpus.split(s) = read_split(split_path(dir, s), corpus.vocab, corpus.config, have);
    have = true;
  }
  return corpus;
}

}  // namespace ctxdetox::corpus
