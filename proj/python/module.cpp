// numpy-facing bindings for the core operations
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "ccdiff/data.hpp"
#include "ccdiff/denoiser.hpp"
#include "ccdiff/engine.hpp"
#include "ccdiff/extractors.hpp"
#include "ccdiff/metrics.hpp"
#include "ccdiff/rng.hpp"
#include "ccdiff/schedule.hpp"

namespace py = pybind11;
using namespace ccdiff;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    Shape s;
    for (py::ssize_t i = 0; i < a.ndim(); ++i) s.push_back(static_cast<int>(a.shape(i)));
    std::vector<double> v(a.data(), a.data() + a.size());
    return Tensor::from(std::move(s), std::move(v));
}

py::array_t<double> to_array(const Tensor& t) {
    std::vector<py::ssize_t> sh(t.shape().begin(), t.shape().end());
    py::array_t<double> out(sh);
    std::memcpy(out.mutable_data(), t.data(), sizeof(double) * (std::size_t)t.numel());
    return out;
}

std::vector<Tensor> to_tensors(const std::vector<Array>& arrays) {
    std::vector<Tensor> out;
    out.reserve(arrays.size());
    for (const Array& a : arrays) out.push_back(to_tensor(a));
    return out;
}

} // namespace

PYBIND11_MODULE(_ccdiff, m) {
    m.doc() = "conditional diffusion with cycle-consistency reward fine-tuning";

    py::register_exception<Error>(m, "CcdiffError");
    py::register_exception<ShapeError>(m, "ShapeError");
    py::register_exception<NumericError>(m, "NumericError");
    py::register_exception<IoError>(m, "IoError");
    py::register_exception<ConfigError>(m, "ConfigError");

    py::enum_<ConditionKind>(m, "ConditionKind")
        .value("SoftEdge", ConditionKind::SoftEdge)
        .value("BinaryEdge", ConditionKind::BinaryEdge)
        .value("SegMask", ConditionKind::SegMask)
        .value("DepthMap", ConditionKind::DepthMap);
    py::enum_<Strategy>(m, "Strategy")
        .value("DiffusionOnly", Strategy::DiffusionOnly)
        .value("Efficient", Strategy::Efficient)
        .value("FullSampling", Strategy::FullSampling)
        .value("RewardOnly", Strategy::RewardOnly);

    py::class_<NoiseSchedule>(m, "NoiseSchedule")
        .def_readonly("T", &NoiseSchedule::T)
        .def_readonly("beta", &NoiseSchedule::beta)
        .def_readonly("alpha_bar", &NoiseSchedule::alpha_bar);
    m.def("make_schedule", &make_schedule, py::arg("T"), py::arg("beta_start") = 1e-4,
          py::arg("beta_end") = 0.02);

    m.def("forward_diffuse", [](const Array& x0, int t, const Array& eps, const NoiseSchedule& s) {
        return to_array(forward_diffuse(to_tensor(x0), t, to_tensor(eps), s));
    });
    m.def("predict_x0_single_step",
          [](const Array& x_t, const Array& eps_hat, int t, const NoiseSchedule& s) {
              return to_array(predict_x0_single_step(to_tensor(x_t), to_tensor(eps_hat), t, s));
          });
    m.def("predict_x0_unclamped",
          [](const Array& x_t, const Array& eps_hat, int t, const NoiseSchedule& s) {
              return to_array(predict_x0_unclamped(to_tensor(x_t), to_tensor(eps_hat), t, s));
          });
    m.def("ddpm_step", [](const Array& x_t, const Array& eps_hat, int t, const Array& z,
                          const NoiseSchedule& s) {
        return to_array(ddpm_step(to_tensor(x_t), to_tensor(eps_hat), t, to_tensor(z), s));
    });

    py::class_<Dataset>(m, "Dataset")
        .def("__len__", [](const Dataset& d) { return d.samples.size(); })
        .def_readonly("K", &Dataset::K)
        .def_readonly("kind", &Dataset::kind)
        .def("x0", [](const Dataset& d, int i) { return to_array(d.samples.at((std::size_t)i).x0); })
        .def("cond",
             [](const Dataset& d, int i) { return to_array(d.samples.at((std::size_t)i).cond); })
        .def("caption_id", [](const Dataset& d, int i) {
            return d.samples.at((std::size_t)i).caption_id;
        });
    m.def("generate_dataset", &generate_dataset, py::arg("n"), py::arg("H"), py::arg("W"),
          py::arg("kind"), py::arg("K"), py::arg("seed"));
    m.def("write_dataset", &write_dataset);
    m.def("read_dataset", &read_dataset);

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("T", &TrainConfig::T)
        .def_readwrite("t_thre", &TrainConfig::t_thre)
        .def_readwrite("lambda_", &TrainConfig::lambda)
        .def_readwrite("lr", &TrainConfig::lr)
        .def_readwrite("batch", &TrainConfig::batch)
        .def_readwrite("iters", &TrainConfig::iters)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_readwrite("strategy", &TrainConfig::strategy)
        .def_readwrite("T_sample", &TrainConfig::T_sample)
        .def_readwrite("beta_start", &TrainConfig::beta_start)
        .def_readwrite("beta_end", &TrainConfig::beta_end);

    py::class_<StepReport>(m, "StepReport")
        .def_readonly("iter", &StepReport::iter)
        .def_readonly("t", &StepReport::t)
        .def_readonly("l_train", &StepReport::l_train)
        .def_readonly("reward_active", &StepReport::reward_active)
        .def_readonly("l_reward", &StepReport::l_reward)
        .def_readonly("l_total", &StepReport::l_total);
    py::class_<TapeRow>(m, "TapeRow")
        .def_readonly("label", &TapeRow::label)
        .def_readonly("sampling_steps", &TapeRow::sampling_steps)
        .def_readonly("tape_nodes", &TapeRow::tape_nodes)
        .def_readonly("saved_elements", &TapeRow::saved_elements)
        .def_readonly("wall_seconds", &TapeRow::wall_seconds);
    py::class_<TrainResult>(m, "TrainResult")
        .def_readonly("steps", &TrainResult::steps)
        .def_readonly("tape", &TrainResult::tape)
        .def_readonly("samples_consumed", &TrainResult::samples_consumed);

    py::class_<DenoiserParams>(m, "DenoiserParams");
    m.def("init_denoiser", &init_denoiser, py::arg("c_v_channels"), py::arg("seed"));
    m.def("cond_input_channels", &cond_input_channels);
    m.def("save_denoiser", &save_denoiser);
    m.def("load_denoiser", &load_denoiser);
    m.def("denoiser_forward",
          [](const DenoiserParams& p, const Array& x_t, int t, int caption_id, const Array& c_v) {
              NoGradScope ng;
              const Tensor c_t = caption_embedding(p, caption_id);
              return to_array(denoiser_forward(p, to_tensor(x_t), t, c_t, to_tensor(c_v)));
          });
    m.def("cond_to_input", [](const Array& cond, ConditionKind kind, int K) {
        return to_array(cond_to_input(to_tensor(cond), kind, K));
    });

    m.def("pretrain", [](DenoiserParams& p, const Dataset& d, const std::vector<int>& idx,
                         const TrainConfig& cfg) { return pretrain(p, d, idx, cfg); });

    py::class_<SegExtractorParams>(m, "SegExtractorParams")
        .def_readonly("layers", &SegExtractorParams::layers)
        .def_readonly("K", &SegExtractorParams::K);
    m.def("train_seg_extractor",
          [](const std::vector<Array>& images, const std::vector<Array>& masks, int K, int layers,
             std::uint64_t seed, int iters) {
              return train_seg_extractor(to_tensors(images), to_tensors(masks), K, layers, seed,
                                         iters);
          },
          py::arg("images"), py::arg("masks"), py::arg("K"), py::arg("layers"), py::arg("seed"),
          py::arg("iters") = 300);
    py::class_<RewardSpec>(m, "RewardSpec")
        .def_readonly("kind", &RewardSpec::kind)
        .def_readonly("lambda_", &RewardSpec::lambda);
    m.def("make_reward_spec", &make_reward_spec, py::arg("kind"), py::arg("K"), py::arg("lambda"),
          py::arg("seg") = SegExtractorParams{});
    m.def("default_lambda", &default_lambda, py::arg("kind"), py::arg("lineart_flavor") = false);

    m.def("finetune", [](DenoiserParams& p, const Dataset& d, const std::vector<int>& idx,
                         const RewardSpec& spec, const TrainConfig& cfg) {
        return finetune(p, d, idx, spec, cfg);
    });
    m.def("validation_diffusion_loss",
          [](const DenoiserParams& p, const Dataset& d, const std::vector<int>& idx,
             const NoiseSchedule& s, std::uint64_t seed) {
              return validation_diffusion_loss(p, d, idx, s, seed);
          });

    m.def("extract_soft_edge",
          [](const Array& img) { NoGradScope ng; return to_array(extract_soft_edge(to_tensor(img))); });
    m.def("extract_binary_edge_soft",
          [](const Array& img, double low, double high) {
              NoGradScope ng;
              return to_array(extract_binary_edge_soft(to_tensor(img), low, high));
          },
          py::arg("img"), py::arg("low") = 0.1, py::arg("high") = 0.2);
    m.def("extract_depth",
          [](const Array& img) { NoGradScope ng; return to_array(extract_depth(to_tensor(img))); });
    m.def("extract_segmentation", [](const Array& img, const SegExtractorParams& seg) {
        NoGradScope ng;
        return to_array(extract_segmentation(to_tensor(img), seg));
    });
    m.def("one_hot", [](const Array& classmap, int K) {
        return to_array(one_hot(to_tensor(classmap), K));
    });
    m.def("argmax_channels",
          [](const Array& logits) { return to_array(argmax_channels(to_tensor(logits))); });

    m.def("miou", [](const Array& a, const Array& b, int K) {
        return miou(to_tensor(a), to_tensor(b), K);
    });
    m.def("f1_edge", [](const Array& a, const Array& b, bool tolerance_1px) {
        return f1_edge(to_tensor(a), to_tensor(b), tolerance_1px);
    }, py::arg("a"), py::arg("b"), py::arg("tolerance_1px") = false);
    m.def("ssim", [](const Array& a, const Array& b) { return ssim(to_tensor(a), to_tensor(b)); });
    m.def("rmse", [](const Array& a, const Array& b) { return rmse(to_tensor(a), to_tensor(b)); });

    m.def("sample",
          [](const DenoiserParams& p, const Array& cond, ConditionKind kind, int K, int caption_id,
             const NoiseSchedule& s, std::uint64_t seed) {
              NoGradScope ng;
              const Tensor c_v = cond_to_input(to_tensor(cond), kind, K);
              const Tensor c_t = caption_embedding(p, caption_id);
              const DenoiseFn fn = [&](const Tensor& x, int t, const Tensor& ct, const Tensor& cv) {
                  return denoiser_forward(p, x, t, ct, cv);
              };
              return to_array(sample_full(fn, c_v, c_t, s, seed));
          },
          py::arg("params"), py::arg("cond"), py::arg("kind"), py::arg("K"), py::arg("caption_id"),
          py::arg("schedule"), py::arg("seed"));
}
