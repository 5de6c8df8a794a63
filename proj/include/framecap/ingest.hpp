#pragma once

#include <filesystem>
#include <string>

#include <fmt/format.h>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/videoio.hpp>
#include <opencv2/videoio/registry.hpp>

#include "framecap/core.hpp"
#include "framecap/error.hpp"

// Frame extraction on the 1 FPS grid via OpenCV's videoio.
//
// Rounding: a frame is emitted for every whole second t with t < duration,
// so a 3.4 s clip yields 4 frames (t = 0..3) and a 5.0 s clip 5 frames. The
// frame for second t is the first decoded frame whose index is >= t * fps.
namespace framecap {

struct IngestOptions {
  std::string video_id;
  std::string action;
  std::string source;
  Split split = Split::train;
  int jpeg_quality = 95;
};

inline std::string video_backends() {
  std::string out;
  for (auto b : cv::videoio_registry::getStreamBackends()) {
    if (!out.empty()) out += ", ";
    out += cv::videoio_registry::getBackendName(b);
  }
  return out.empty() ? "none" : out;
}

inline FrameSequence ingest_frames(const std::filesystem::path& video, const std::filesystem::path& out_dir,
                                   const IngestOptions& opt, int fps = 1) {
  if (fps != 1) throw ValidationError("only the 1 FPS grid is supported");
  if (!std::filesystem::exists(video)) throw ValidationError("video not found: " + video.string());
  cv::VideoCapture cap(video.string());
  if (!cap.isOpened()) {
    throw Error(fmt::format("cannot decode '{}': OpenCV videoio could not open it (available backends: {}); "
                            "install OpenCV with FFmpeg or GStreamer support",
                            video.string(), video_backends()));
  }
  const double native_fps = cap.get(cv::CAP_PROP_FPS);
  if (!(native_fps > 0)) throw Error(fmt::format("cannot decode '{}': stream reports no frame rate", video.string()));

  std::filesystem::create_directories(out_dir);
  FrameSequence seq;
  seq.id = opt.video_id.empty() ? video.stem().string() : opt.video_id;
  seq.action = opt.action;
  seq.source = opt.source;
  seq.split = opt.split;

  cv::Mat frame;
  long long decoded = 0;
  int next_second = 0;
  while (cap.read(frame)) {
    if (static_cast<double>(decoded) >= next_second * native_fps) {
      const auto path = out_dir / fmt::format("frame_{:04d}.jpg", next_second);
      if (!cv::imwrite(path.string(), frame, {cv::IMWRITE_JPEG_QUALITY, opt.jpeg_quality})) {
        throw Error("cannot write " + path.string());
      }
      seq.frames.push_back({seq.id, next_second, next_second, path.string(), std::nullopt});
      ++next_second;
    }
    ++decoded;
  }
  if (seq.frames.empty()) throw Error(fmt::format("no frames extracted from '{}'", video.string()));
  return seq;
}

}  // namespace framecap
