#pragma once

#include <cctype>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "framecap/core.hpp"
#include "framecap/error.hpp"
#include "framecap/prompt_assets.hpp"

// Prompt rendering and reply parsing.
//
// Templates live in prompts/*.txt and are compiled in verbatim. Template
// syntax:
//   {name}                   scalar slot
//   {{#list}}...{{/list}}    body repeated per list item; inside it {n}
//                            (1-based position), {letter} (A, B, ...) and
//                            {text} (the item) are bound, other slots fall
//                            through to the scalars
// Substituted values are never rescanned, so captions may contain braces.
namespace framecap {

enum class PromptKind {
  caption_generation,
  progression_pseudo,
  progression_eval,
  caption_matching,
  keyframe_selection,
  frame_classification,
  caption_qa,
};

inline constexpr EnumNames<PromptKind, 7> kPromptKindNames{{
    {PromptKind::caption_generation, "caption_generation"},
    {PromptKind::progression_pseudo, "progression_pseudo"},
    {PromptKind::progression_eval, "progression_eval"},
    {PromptKind::caption_matching, "caption_matching"},
    {PromptKind::keyframe_selection, "keyframe_selection"},
    {PromptKind::frame_classification, "frame_classification"},
    {PromptKind::caption_qa, "caption_qa"},
}};

inline std::string_view template_for(PromptKind kind) {
  switch (kind) {
    case PromptKind::caption_generation: return assets::caption_generation;
    case PromptKind::progression_pseudo: return assets::progression_pseudo;
    case PromptKind::progression_eval: return assets::progression_eval;
    case PromptKind::caption_matching: return assets::caption_matching;
    case PromptKind::keyframe_selection: return assets::keyframe_selection;
    case PromptKind::frame_classification: return assets::frame_classification;
    case PromptKind::caption_qa: return assets::caption_qa;
  }
  throw Error("unknown prompt kind");
}

inline constexpr std::size_t kMaxOptions = 26;  // letters A..Z

inline char option_letter(std::size_t i) {
  if (i >= kMaxOptions) throw ValidationError("option count exceeds letter range A-Z");
  return static_cast<char>('A' + i);
}

struct PromptParams {
  std::map<std::string, std::string> scalars;
  std::map<std::string, std::vector<std::string>> lists;

  PromptParams& set(const std::string& k, std::string v) {
    scalars[k] = std::move(v);
    return *this;
  }
  PromptParams& set(const std::string& k, long long v) { return set(k, std::to_string(v)); }
  PromptParams& list(const std::string& k, std::vector<std::string> v) {
    lists[k] = std::move(v);
    return *this;
  }
};

namespace detail {

inline bool is_ident_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
}

// Renders `tpl`; `local` binds item slots inside a list section.
inline void render_into(std::string& out, std::string_view tpl, const PromptParams& params,
                        const std::map<std::string, std::string>* local) {
  std::size_t i = 0;
  while (i < tpl.size()) {
    if (tpl.compare(i, 3, "{{#") == 0) {
      auto name_end = tpl.find("}}", i + 3);
      if (name_end == std::string_view::npos) throw Error("template: unterminated section tag");
      std::string name(tpl.substr(i + 3, name_end - i - 3));
      const std::string close = "{{/" + name + "}}";
      auto body_end = tpl.find(close, name_end + 2);
      if (body_end == std::string_view::npos) throw Error("template: section '" + name + "' not closed");
      auto body = tpl.substr(name_end + 2, body_end - name_end - 2);
      auto it = params.lists.find(name);
      if (it == params.lists.end()) throw ValidationError("missing slot '" + name + "'");
      if (it->second.size() > kMaxOptions && body.find("{letter}") != std::string_view::npos) {
        throw ValidationError("option count exceeds letter range A-Z");
      }
      for (std::size_t k = 0; k < it->second.size(); ++k) {
        std::map<std::string, std::string> item{{"n", std::to_string(k + 1)}, {"text", it->second[k]}};
        if (k < kMaxOptions) item["letter"] = std::string(1, option_letter(k));
        render_into(out, body, params, &item);
      }
      i = body_end + close.size();
      continue;
    }
    if (tpl[i] == '{') {
      std::size_t j = i + 1;
      while (j < tpl.size() && is_ident_char(tpl[j])) ++j;
      if (j > i + 1 && j < tpl.size() && tpl[j] == '}') {
        std::string name(tpl.substr(i + 1, j - i - 1));
        const std::string* value = nullptr;
        if (local) {
          auto it = local->find(name);
          if (it != local->end()) value = &it->second;
        }
        if (!value) {
          auto it = params.scalars.find(name);
          if (it == params.scalars.end()) throw ValidationError("missing slot '" + name + "'");
          value = &it->second;
        }
        out += *value;
        i = j + 1;
        continue;
      }
    }
    out += tpl[i++];
  }
}

}  // namespace detail

inline std::string render_template(std::string_view tpl, const PromptParams& params) {
  std::string out;
  out.reserve(tpl.size() + 256);
  detail::render_into(out, tpl, params, nullptr);
  return out;
}

inline std::string render_prompt(PromptKind kind, const PromptParams& params) {
  return render_template(template_for(kind), params);
}

// Wording of the matching prompt's final "unsure" option, read from the
// template asset.
inline std::string unsure_option_text() {
  const std::string_view tpl = assets::caption_matching;
  const std::string_view marker = "{unsure_letter}. ";
  auto b = tpl.find(marker);
  auto e = tpl.find('\n', b);
  return std::string(tpl.substr(b + marker.size(), e - b - marker.size()));
}

// Ordered multiple-choice options; letters are assigned by position. With
// includes_unsure the last entry is the unsure option.
class McqOptions {
 public:
  McqOptions(std::vector<std::string> choices, bool includes_unsure)
      : options_(std::move(choices)), includes_unsure_(includes_unsure) {
    if (includes_unsure_) options_.push_back(unsure_option_text());
    if (options_.size() < 2) throw ValidationError("need at least 2 options");
    if (options_.size() > kMaxOptions) {
      throw ValidationError(fmt::format("{} options exceed the letter range A-Z", options_.size()));
    }
  }

  std::size_t size() const { return options_.size(); }
  bool includes_unsure() const { return includes_unsure_; }
  const std::vector<std::string>& texts() const { return options_; }
  char letter(std::size_t i) const { return option_letter(i); }

  // Options other than unsure.
  std::vector<std::string> choices() const {
    auto v = options_;
    if (includes_unsure_) v.pop_back();
    return v;
  }

  std::optional<std::size_t> unsure_index() const {
    if (!includes_unsure_) return std::nullopt;
    return options_.size() - 1;
  }

 private:
  std::vector<std::string> options_;
  bool includes_unsure_;
};

// ---------------------------------------------------------------------------
// Typed renderers for each prompt kind

inline std::string render_caption_generation(std::size_t num_frames, const std::string& action) {
  if (num_frames < 1) throw ValidationError("caption generation needs T >= 1");
  return render_prompt(PromptKind::caption_generation,
                       PromptParams{}
                           .set("T", static_cast<long long>(num_frames))
                           .set("action", action)
                           .list("frames_but_last", std::vector<std::string>(num_frames - 1)));
}

enum class ProgressionMode { pseudo, eval };

inline constexpr EnumNames<ProgressionMode, 2> kProgressionModeNames{{
    {ProgressionMode::pseudo, "pseudo"},
    {ProgressionMode::eval, "eval"},
}};

inline std::string render_progression(ProgressionMode mode, const std::string& desc1,
                                      const std::string& desc2,
                                      const std::optional<std::string>& action = std::nullopt) {
  PromptParams p;
  p.set("desc1", desc1).set("desc2", desc2);
  if (mode == ProgressionMode::eval) {
    if (!action) throw ValidationError("eval-mode progression prompt needs an action label");
    p.set("action", *action);
    return render_prompt(PromptKind::progression_eval, p);
  }
  return render_prompt(PromptKind::progression_pseudo, p);
}

// `frame_number` is the 1-based position of the frame being matched.
inline std::string render_caption_matching(const McqOptions& options, std::size_t frame_number) {
  if (!options.includes_unsure()) throw ValidationError("caption matching requires the unsure option");
  return render_prompt(PromptKind::caption_matching,
                       PromptParams{}
                           .set("m", static_cast<long long>(frame_number))
                           .list("options", options.choices())
                           .set("unsure_letter", std::string(1, options.letter(options.size() - 1))));
}

// ---------------------------------------------------------------------------
// Reply parsing

// Extracts "<Frame i>: caption" lines. Markdown fences are ignored, text
// before the first tag is ignored, and untagged lines after a tag continue
// that frame's caption.
inline std::vector<std::string> parse_frame_captions(std::string_view reply, std::size_t num_frames) {
  if (num_frames < 1) throw ValidationError("parse_frame_captions: T must be >= 1");
  static const std::regex tag_re(R"(^[\s*_#>`-]*<\s*[Ff][Rr][Aa][Mm][Ee]\s*(\d+)\s*>[*_`]*\s*:?\s*(.*)$)");
  std::vector<std::optional<std::string>> found(num_frames);
  std::optional<std::size_t> current;

  std::size_t pos = 0;
  while (pos <= reply.size()) {
    auto nl = reply.find('\n', pos);
    std::string line(reply.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos));
    pos = nl == std::string_view::npos ? reply.size() + 1 : nl + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string t = trim(line);
    if (t.starts_with("```")) continue;

    std::smatch m;
    if (std::regex_match(line, m, tag_re)) {
      const unsigned long i = std::stoul(m[1].str());
      if (i < 1 || i > num_frames) {
        throw ParseError(fmt::format("frame {} beyond T={}", i, num_frames));
      }
      if (found[i - 1]) throw ParseError(fmt::format("frame {} duplicated", i));
      found[i - 1] = trim(m[2].str());
      current = i - 1;
    } else if (current && !t.empty()) {
      auto& cap = *found[*current];
      cap = cap.empty() ? t : cap + " " + t;
    }
  }

  std::vector<std::string> out;
  out.reserve(num_frames);
  for (std::size_t i = 0; i < num_frames; ++i) {
    if (!found[i]) throw ParseError(fmt::format("frame {} not found", i + 1));
    if (found[i]->empty()) throw ParseError(fmt::format("frame {} has an empty caption", i + 1));
    out.push_back(std::move(*found[i]));
  }
  return out;
}

// Index of the first standalone capital letter within A..A+n_options-1.
// "Standalone" means not adjacent to another letter or digit, so "B",
// "B.", "(B)" and "The answer is B" all parse, while the T of "The" does not.
inline std::optional<std::size_t> try_parse_choice(std::string_view reply, std::size_t n_options) {
  if (n_options < 2 || n_options > kMaxOptions) {
    throw ValidationError(fmt::format("n_options={} outside [2, {}]", n_options, kMaxOptions));
  }
  auto alnum = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  for (std::size_t i = 0; i < reply.size(); ++i) {
    const char c = reply[i];
    if (c < 'A' || c > 'Z') continue;
    if (i > 0 && alnum(reply[i - 1])) continue;
    if (i + 1 < reply.size() && alnum(reply[i + 1])) continue;
    const auto idx = static_cast<std::size_t>(c - 'A');
    if (idx < n_options) return idx;
  }
  return std::nullopt;
}

inline std::size_t parse_choice(std::string_view reply, std::size_t n_options) {
  if (auto idx = try_parse_choice(reply, n_options)) return *idx;
  throw ParseError("unparseable reply: no option letter in A-" +
                   std::string(1, option_letter(n_options - 1)));
}

}  // namespace framecap
