#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <string>
#include <vector>

#include "facetalk/checkpoint.hpp"
#include "facetalk/error.hpp"
#include "facetalk/features.hpp"
#include "facetalk/losses.hpp"
#include "facetalk/seqmodels.hpp"
#include "facetalk/synthesizer.hpp"
#include "facetalk/training.hpp"

namespace py = pybind11;
using namespace facetalk;

namespace {

using NdArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const NdArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Array(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

NdArray to_numpy(const Array& a) {
  std::vector<py::ssize_t> shape(a.shape().begin(), a.shape().end());
  NdArray out(shape);
  std::copy(a.data(), a.data() + a.size(), out.mutable_data());
  return out;
}

// [L x 20] sequence array; rank-1 input counts as one frame.
Array to_sequence(const NdArray& a) {
  Array seq = to_array(a);
  if (seq.rank() == 1) seq = seq.reshaped(Shape{1, seq.size()});
  if (seq.rank() != 2 || seq.cols() != kFrameDim)
    throw ShapeError("expected an [L x 20] array, got " + shape_string(seq.shape()));
  return seq;
}

std::vector<Array> to_sequences(const std::vector<NdArray>& list) {
  std::vector<Array> out;
  for (const auto& a : list) out.push_back(to_sequence(a));
  return out;
}

AuPose to_aupose(const NdArray& a) {
  const Array v = to_array(a);
  if (v.size() != kFrameDim) throw ShapeError("expected 20 values, got " + shape_string(v.shape()));
  AuPose p;
  std::copy(v.data(), v.data() + kFrameDim, p.values.begin());
  return p;
}

NdArray aupose_to_numpy(const AuPose& p) {
  NdArray out(static_cast<py::ssize_t>(kFrameDim));
  std::copy(p.values.begin(), p.values.end(), out.mutable_data());
  return out;
}

NdArray image_to_numpy(const FrameImage& img) {
  NdArray out({static_cast<py::ssize_t>(img.height), static_cast<py::ssize_t>(img.width)});
  std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
  return out;
}

FrameImage image_from_numpy(const NdArray& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D image");
  FrameImage img(static_cast<std::size_t>(a.shape(1)), static_cast<std::size_t>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  return img;
}

LossConfig loss_config(double gamma, double alpha, std::size_t n_b, int exponent,
                       bool continuity_mean_frames) {
  LossConfig cfg;
  cfg.gamma = gamma;
  cfg.alpha = alpha;
  cfg.n_b = n_b;
  cfg.exponent = exponent;
  cfg.continuity_mean_frames = continuity_mean_frames;
  return cfg;
}

// Native-unit output of a normalized prediction, clamped to the valid ranges.
Array to_native(const Array& normalized, const NormStats& stats) {
  AuPoseSequence seq = denormalize(AuPoseSequence::from_array(normalized), stats);
  for (auto& f : seq.frames) f = clamp_native(f);
  return seq.to_array();
}

class ListeningPredictor {
 public:
  explicit ListeningPredictor(const std::filesystem::path& checkpoint)
      : loaded_(load_listening(checkpoint)) {}

  std::size_t window() const { return loaded_.model->config().n; }

  NdArray predict(const NdArray& speaker) {
    const Array in = normalize(AuPoseSequence::from_array(to_sequence(speaker)), loaded_.stats)
                         .to_array();
    return to_numpy(to_native(loaded_.model->predict(in), loaded_.stats));
  }

 private:
  LoadedListening loaded_;
};

class SpeakingPredictor {
 public:
  explicit SpeakingPredictor(const std::filesystem::path& checkpoint)
      : loaded_(load_speaking(checkpoint)) {}

  std::size_t frames() const { return loaded_.model->config().dec_len; }

  NdArray predict(const std::string& text) {
    return to_numpy(to_native(loaded_.model->predict(tokenize(text)), loaded_.stats));
  }

 private:
  LoadedSpeaking loaded_;
};

class SynthGenerator {
 public:
  explicit SynthGenerator(const std::filesystem::path& checkpoint)
      : loaded_(load_synth(checkpoint)) {}

  std::size_t resolution() const { return loaded_.model->config.resolution; }

  // [L x res x res] free-running frames for a native-unit [L x 20] track.
  NdArray generate(const NdArray& track) {
    const auto seq = AuPoseSequence::from_array(to_sequence(track));
    const auto frames = generate_sequence(loaded_.model->generator, seq, loaded_.stats);
    const std::size_t res = resolution();
    NdArray out({static_cast<py::ssize_t>(frames.size()), static_cast<py::ssize_t>(res),
                 static_cast<py::ssize_t>(res)});
    double* dst = out.mutable_data();
    for (const auto& f : frames) dst = std::copy(f.pixels.begin(), f.pixels.end(), dst);
    return out;
  }

 private:
  LoadedSynth loaded_;
};

}  // namespace

PYBIND11_MODULE(_facetalk, m) {
  m.doc() = "Bindings of the facetalk core library";

  auto base = py::register_exception<Error>(m, "FacetalkError", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());

  m.def("au_names", [] { return std::vector<std::string>(kAuNames.begin(), kAuNames.end()); });
  m.def("pose_names",
        [] { return std::vector<std::string>(kPoseNames.begin(), kPoseNames.end()); });
  m.def("column_names", [] {
    std::vector<std::string> out;
    for (std::size_t d = 0; d < kFrameDim; ++d) out.push_back(column_name(d));
    return out;
  });

  m.def(
      "mse_loss",
      [](const NdArray& gt, const NdArray& pred, double gamma, int exponent) {
        return mse_loss(to_sequence(gt), to_sequence(pred),
                        loss_config(gamma, 0.1, 3, exponent, false));
      },
      py::arg("gt"), py::arg("pred"), py::arg("gamma") = 8.1, py::arg("exponent") = 2);
  m.def(
      "continuity_loss",
      [](const NdArray& gt, const NdArray& pred, std::size_t n_b, bool mean_frames) {
        Array g = to_array(gt), p = to_array(pred);
        if (g.rank() == 1) g = g.reshaped(Shape{g.size(), 1});
        if (p.rank() == 1) p = p.reshaped(Shape{p.size(), 1});
        if (g.shape() != p.shape()) throw ShapeError("gt and pred shapes differ");
        return continuity_loss(g, p, loss_config(8.1, 0.1, n_b, 2, mean_frames));
      },
      py::arg("gt"), py::arg("pred"), py::arg("n_b") = 3, py::arg("mean_frames") = false);
  m.def(
      "total_loss",
      [](const NdArray& gt, const NdArray& pred, double gamma, double alpha, std::size_t n_b,
         int exponent, bool mean_frames) {
        return total_loss(to_sequence(gt), to_sequence(pred),
                          loss_config(gamma, alpha, n_b, exponent, mean_frames));
      },
      py::arg("gt"), py::arg("pred"), py::arg("gamma") = 8.1, py::arg("alpha") = 0.1,
      py::arg("n_b") = 3, py::arg("exponent") = 2, py::arg("mean_frames") = false);
  m.def(
      "eval_mse_cosine",
      [](const std::vector<NdArray>& gt, const std::vector<NdArray>& pred) {
        const auto r = eval_mse_cosine(to_sequences(gt), to_sequences(pred));
        return py::make_tuple(r.d_mse, r.d_cos);
      },
      py::arg("gt"), py::arg("pred"), "Returns (d_mse, d_cos).");
  m.def(
      "reconstruction_error",
      [](const std::vector<NdArray>& gt, const std::vector<NdArray>& rec,
         std::optional<std::vector<bool>> mask) {
        const auto r = reconstruction_error(to_sequences(gt), to_sequences(rec), mask);
        return py::make_tuple(r.d_au, r.d_pose);
      },
      py::arg("gt"), py::arg("reconstructed"), py::arg("mask") = py::none(),
      "Returns (d_au, d_pose).");

  m.def(
      "synth_conversation",
      [](std::uint64_t seed, std::size_t frames, double fps) {
        const ConversationSample s = synth_conversation(seed, frames, fps);
        py::dict out;
        out["speaker"] = to_numpy(s.speaker.to_array());
        out["listener"] = to_numpy(s.listener.to_array());
        out["transcript"] = s.transcript;
        out["fps"] = fps;
        return out;
      },
      py::arg("seed"), py::arg("frames"), py::arg("fps") = 25.0,
      "Deterministic synthetic conversation in native units.");

  m.def(
      "read_csv", [](const std::filesystem::path& p) { return to_numpy(ingest_csv(p).to_array()); },
      py::arg("path"));
  m.def(
      "write_csv",
      [](const std::filesystem::path& p, const NdArray& seq) {
        write_csv(p, AuPoseSequence::from_array(to_sequence(seq)));
      },
      py::arg("path"), py::arg("frames"));
  m.def(
      "read_norm_stats",
      [](const std::filesystem::path& p) { return to_numpy(read_norm_stats(p).to_array()); },
      py::arg("path"), "[2 x 20] array: row 0 min, row 1 max.");

  m.def(
      "read_checkpoint",
      [](const std::filesystem::path& p) {
        py::dict out;
        for (const auto& b : read_checkpoint(p)) out[py::str(b.name)] = to_numpy(b.value);
        return out;
      },
      py::arg("path"), "Blocks as a name -> array dict, in file order.");
  m.def(
      "write_checkpoint",
      [](const std::filesystem::path& p, const py::dict& blocks) {
        std::vector<NamedArray> out;
        for (const auto& [name, value] : blocks)
          out.push_back({py::cast<std::string>(name), to_array(py::cast<NdArray>(value))});
        write_checkpoint(p, out);
      },
      py::arg("path"), py::arg("blocks"));

  m.def(
      "render_face",
      [](const NdArray& values, std::size_t res) {
        return image_to_numpy(render_face(to_aupose(values), res).image);
      },
      py::arg("values"), py::arg("resolution") = 32, "Native AU+POSE frame -> [res x res] image.");
  m.def(
      "extract_aupose",
      [](const NdArray& image) {
        const ExtractedFace e = extract_aupose(image_from_numpy(image));
        return py::make_tuple(aupose_to_numpy(e.values),
                              std::vector<bool>(e.mask.begin(), e.mask.end()));
      },
      py::arg("image"), "Returns (values, mask).");
  m.def("renderer_mask", [] {
    const auto& mask = renderer_mask();
    return std::vector<bool>(mask.begin(), mask.end());
  });

  py::class_<ListeningPredictor>(m, "ListeningPredictor")
      .def(py::init<const std::filesystem::path&>(), py::arg("checkpoint"))
      .def_property_readonly("window", &ListeningPredictor::window)
      .def("predict", &ListeningPredictor::predict, py::arg("speaker"),
           "Native [n x 20] speaker window -> native listener window.");
  py::class_<SpeakingPredictor>(m, "SpeakingPredictor")
      .def(py::init<const std::filesystem::path&>(), py::arg("checkpoint"))
      .def_property_readonly("frames", &SpeakingPredictor::frames)
      .def("predict", &SpeakingPredictor::predict, py::arg("text"),
           "Transcript line -> native speaker track.");
  py::class_<SynthGenerator>(m, "SynthGenerator")
      .def(py::init<const std::filesystem::path&>(), py::arg("checkpoint"))
      .def_property_readonly("resolution", &SynthGenerator::resolution)
      .def("generate", &SynthGenerator::generate, py::arg("track"));
}
