#pragma once

// Fixtures and oracle mock backends shared by the unit tests and the
// acceptance binary. No GoogleTest dependency here.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <regex>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "framecap/core.hpp"
#include "framecap/gateway.hpp"
#include "framecap/progression.hpp"
#include "framecap/protocol.hpp"
#include "framecap/rng.hpp"

namespace fctest {

using namespace framecap;

#ifdef FRAMECAP_TEST_DIR
inline std::filesystem::path test_dir() { return FRAMECAP_TEST_DIR; }
#endif

inline std::string slurp(const std::filesystem::path& p) {
  auto b = read_file_bytes(p.string());
  if (!b) throw std::runtime_error("cannot read " + p.string());
  return *b;
}

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "framecap-test-XXXXXX").string();
    if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// Frames with remote-style locators: hashed by URL, never fetched.
inline FrameRef remote_frame(const std::string& video, int index) {
  return {video, index, index, fmt::format("https://frames.test/{}/{}.jpg", video, index), std::nullopt};
}

inline FrameSequence make_sequence(const std::string& id, std::size_t t, const std::string& action = "whisking eggs",
                                   const std::string& source = "") {
  FrameSequence s;
  s.id = id;
  s.source = source;
  s.action = action;
  for (std::size_t i = 0; i < t; ++i) s.frames.push_back(remote_frame(id, static_cast<int>(i)));
  return s;
}

// Ground-truth description of a frame.
using Truth = std::function<std::string(const FrameRef&)>;

// Default truth: unique per frame, with a progression "state" equal to the
// frame index.
inline std::string default_truth(const FrameRef& f) {
  return fmt::format("state {}: {} shows step {}", f.index, f.video_id, f.index);
}

// Remainder of the first line starting with `prefix`.
inline std::optional<std::string> line_after(std::string_view text, std::string_view prefix) {
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    if (line.starts_with(prefix)) return std::string(line.substr(prefix.size()));
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  return std::nullopt;
}

// Replies "<Frame k>: caption_k" for the frames of the request.
inline std::string frame_reply(const std::vector<std::string>& captions) {
  std::string out;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    out += fmt::format("<Frame {}>: {}\n", i + 1, captions[i]);
  }
  return out;
}

// Captioner whose captions are a function of the request's frames.
using CaptionFn = std::function<std::vector<std::string>(const std::vector<FrameRef>&)>;

inline MockScript captioner(CaptionFn fn) {
  return MockScript{}.on([fn = std::move(fn)](const ModelRequest& r) -> std::optional<std::string> {
    if (r.role != Role::captioner) return std::nullopt;
    return frame_reply(fn(r.images));
  });
}

inline MockScript oracle_captioner(Truth truth = default_truth) {
  return captioner([truth](const std::vector<FrameRef>& frames) {
    std::vector<std::string> caps;
    for (const auto& f : frames) caps.push_back(truth(f));
    return caps;
  });
}

inline MockScript constant_captioner(const std::string& caption) {
  return captioner([caption](const std::vector<FrameRef>& frames) {
    return std::vector<std::string>(frames.size(), caption);
  });
}

// Captions of the two descriptions in a progression prompt, and its mode.
struct ProgressionPrompt {
  ProgressionMode mode;
  std::string desc1;
  std::string desc2;
  std::string action;
};

inline std::optional<ProgressionPrompt> read_progression_prompt(const std::string& prompt) {
  if (auto a = line_after(prompt, "Image 1 description: ")) {
    auto b = line_after(prompt, "Image 2 description: ");
    if (!b) return std::nullopt;
    return ProgressionPrompt{ProgressionMode::pseudo, *a, *b, ""};
  }
  auto a = line_after(prompt, "Image 1: ");
  auto b = line_after(prompt, "Image 2: ");
  auto act = line_after(prompt, "Action: ");
  if (!a || !b || !act) return std::nullopt;
  return ProgressionPrompt{ProgressionMode::eval, *a, *b, *act};
}

// Letter a judge must answer to express `label` in `mode`.
inline std::string letter_for(ProgressionMode mode, ChangeLabel label) {
  if (label == ChangeLabel::unsure) return "C";
  const bool change = label == ChangeLabel::change;
  if (mode == ProgressionMode::pseudo) return change ? "B" : "A";
  return change ? "A" : "B";
}

// "state N" token of a caption, when present.
inline std::optional<int> caption_state(const std::string& caption) {
  static const std::regex re(R"(state (\d+))");
  std::smatch m;
  if (std::regex_search(caption, m, re)) return std::stoi(m[1].str());
  return std::nullopt;
}

// Faithful reading of two captions: progression iff their states differ,
// or, for captions without a state, iff the texts differ.
inline ChangeLabel faithful_label(const std::string& c1, const std::string& c2) {
  auto s1 = caption_state(c1);
  auto s2 = caption_state(c2);
  if (s1 && s2) return *s1 != *s2 ? ChangeLabel::change : ChangeLabel::no_change;
  return c1 != c2 ? ChangeLabel::change : ChangeLabel::no_change;
}

using JudgeFn = std::function<ChangeLabel(const ProgressionPrompt&)>;

inline MockScript text_judge(JudgeFn fn) {
  return MockScript{}.on([fn = std::move(fn)](const ModelRequest& r) -> std::optional<std::string> {
    auto p = read_progression_prompt(r.prompt);
    if (!p) return std::nullopt;
    return letter_for(p->mode, fn(*p));
  });
}

inline MockScript faithful_text_judge() {
  return text_judge([](const ProgressionPrompt& p) { return faithful_label(p.desc1, p.desc2); });
}

// Options of a caption-matching prompt: (letter, text) in shown order, the
// unsure option last.
inline std::vector<std::pair<char, std::string>> matching_options(const std::string& prompt) {
  static const std::regex re(R"(^([A-Z])\. (.*)$)");
  std::vector<std::pair<char, std::string>> out;
  std::size_t pos = 0;
  while (pos < prompt.size()) {
    auto nl = prompt.find('\n', pos);
    std::string line = prompt.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    std::smatch m;
    if (std::regex_match(line, m, re)) out.push_back({m[1].str()[0], m[2].str()});
    if (nl == std::string::npos) break;
    pos = nl + 1;
  }
  return out;
}

// Vision judge choosing the option whose text equals truth(frame), else
// the unsure option.
inline MockScript oracle_vision_judge(Truth truth = default_truth) {
  return MockScript{}.on([truth](const ModelRequest& r) -> std::optional<std::string> {
    if (r.role != Role::vision_judge || r.images.size() != 1) return std::nullopt;
    auto opts = matching_options(r.prompt);
    if (opts.empty()) return std::nullopt;
    const std::string want = truth(r.images.front());
    for (const auto& [letter, text] : opts) {
      if (text == want) return std::string(1, letter);
    }
    return std::string(1, opts.back().first);
  });
}

inline MockScript constant_reply(std::string reply) {
  return MockScript{}.on([reply = std::move(reply)](const ModelRequest&) -> std::optional<std::string> { return reply; });
}

// Deterministic pseudo-random value in [0, n) keyed by request content.
inline std::uint64_t prompt_hash(const ModelRequest& r, std::string_view salt, std::uint64_t n) {
  std::string key(salt);
  key += r.prompt;
  for (const auto& f : r.images) key += "|" + f.uri;
  return derive_seed(0, key) % n;
}

}  // namespace fctest
