// Python bindings. Rasters cross as numpy arrays (H x W x C, C dropped for
// single-channel label and attention maps); JSON documents cross as dicts.

#include <featpipe/cas.hpp>
#include <featpipe/detect.hpp>
#include <featpipe/featurize.hpp>
#include <featpipe/fmap.hpp>
#include <featpipe/io.hpp>
#include <featpipe/pixelclf.hpp>
#include <featpipe/serve.hpp>
#include <featpipe/store.hpp>
#include <featpipe/workflows.hpp>

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>
#include <optional>

namespace py = pybind11;
using namespace featpipe;
using json = nlohmann::json;

namespace {

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_py(const py::handle& obj) {
    if (obj.is_none()) return nullptr;
    return json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

template <typename T>
py::array_t<T> to_numpy(const Raster<T>& r, bool squeeze = false) {
    std::vector<py::ssize_t> shape{r.height(), r.width()};
    if (!(squeeze && r.channels() == 1)) shape.push_back(r.channels());
    py::array_t<T> a(shape);
    std::copy(r.data().begin(), r.data().end(), a.mutable_data());
    return a;
}

template <typename T>
Raster<T> from_numpy(const py::array_t<T, py::array::c_style | py::array::forcecast>& a, const char* what) {
    if (a.ndim() != 2 && a.ndim() != 3) throw std::invalid_argument(std::string(what) + " must be a 2-D or 3-D array");
    const int h = static_cast<int>(a.shape(0));
    const int w = static_cast<int>(a.shape(1));
    const int c = a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1;
    return Raster<T>(h, w, c, std::vector<T>(a.data(), a.data() + a.size()));
}

Image image_arg(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
    return from_numpy<std::uint8_t>(a, "image");
}

LabelRaster labels_arg(const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>& a) {
    auto l = from_numpy<std::int32_t>(a, "labels");
    if (l.channels() != 1) throw std::invalid_argument("labels must be a 2-D array");
    return l;
}

using BackendPtr = std::shared_ptr<FeaturizerBackend>;

/// The Python callable is released under the GIL (or leaked at interpreter exit).
std::shared_ptr<py::object> hold(py::object fn) {
    return std::shared_ptr<py::object>(new py::object(std::move(fn)), [](py::object* p) {
        if (Py_IsInitialized()) {
            py::gil_scoped_acquire gil;
            delete p;
        }
    });
}

BackendPtr callback_backend(const py::dict& descriptor, py::object fn, bool concurrent_safe) {
    auto d = BackendDescriptor::from_json(from_py(descriptor));
    auto held = hold(std::move(fn));
    auto call = [held, name = d.name](const Image& image) -> PatchOutput {
        py::gil_scoped_acquire gil;
        try {
            py::tuple out = (*held)(to_numpy(image)).cast<py::tuple>();
            if (out.size() != 2) throw BackendError("backend '" + name + "' must return (features, attention)");
            PatchOutput po;
            po.features = from_numpy<float>(out[0].cast<py::array_t<float, py::array::c_style | py::array::forcecast>>(),
                                            "features");
            po.attention = from_numpy<float>(
                out[1].cast<py::array_t<float, py::array::c_style | py::array::forcecast>>(), "attention");
            return po;
        } catch (py::error_already_set& e) {
            throw BackendError("backend '" + name + "' raised: " + e.what());
        } catch (const py::cast_error& e) {
            throw BackendError("backend '" + name + "' returned an unusable value: " + e.what());
        }
    };
    return std::make_shared<CallbackBackend>(std::move(d), std::move(call), concurrent_safe);
}

TransformSet default_set(const FeaturizerBackend& backend) {
    const int s = backend.descriptor().stride;
    std::vector<int> d;
    for (int i = 1; i <= s / 2; ++i) d.push_back(i);
    return standard_transform_set(s, Neighborhood::moore, d, false);
}

py::dict fixture_dict(const workflows::WeakSegFixture& f) {
    py::dict d;
    d["name"] = f.name;
    d["image"] = to_numpy(f.image);
    d["scribbles"] = to_numpy(f.scribbles, true);
    d["truth"] = to_numpy(f.truth, true);
    d["classes"] = f.classes;
    return d;
}

workflows::FeatureSpec feature_spec(const std::string& source, const FeaturizerBackend* backend,
                                    const std::optional<TransformSet>& set, const std::optional<std::vector<double>>& sigmas,
                                    bool per_channel) {
    workflows::FeatureSpec spec;
    spec.source = pixelclf::feature_source_from_string(source);
    if (spec.source != pixelclf::FeatureSource::classical) {
        if (!backend) throw std::invalid_argument("deep and hybrid features need a backend");
        spec.backend = backend;
        spec.transforms = set ? *set : default_set(*backend);
    }
    if (sigmas) spec.classical.sigmas = *sigmas;
    spec.classical.per_channel = per_channel;
    return spec;
}

pixelclf::PixelClassifier train_classifier(const std::vector<py::array>& images, const std::vector<py::array>& labels,
                                           const std::string& features, BackendPtr backend,
                                           std::optional<TransformSet> set, std::optional<std::string> classifier,
                                           double c_reg, int trees, std::uint64_t seed, int max_iter, int workers,
                                           std::optional<std::vector<double>> sigmas, bool per_channel) {
    if (images.empty() || images.size() != labels.size()) {
        throw std::invalid_argument("need one label raster per image (and at least one image)");
    }
    std::vector<Image> imgs;
    std::vector<LabelRaster> lbls;
    for (std::size_t i = 0; i < images.size(); ++i) {
        imgs.push_back(image_arg(images[i]));
        lbls.push_back(labels_arg(labels[i]));
    }
    const auto spec = feature_spec(features, backend.get(), set, sigmas, per_channel);
    pixelclf::TrainOptions opts;
    opts.kind = classifier ? pixelclf::classifier_kind_from_string(*classifier)
                : spec.source == pixelclf::FeatureSource::deep ? pixelclf::ClassifierKind::logistic
                                                               : pixelclf::ClassifierKind::random_forest;
    opts.c_reg = c_reg;
    opts.trees = trees;
    opts.seed = seed;
    opts.max_iter = max_iter;
    opts.workers = workers;
    py::gil_scoped_release release;
    pixelclf::Samples samples;
    std::optional<pixelclf::FeatureRecipe> recipe;
    for (std::size_t i = 0; i < imgs.size(); ++i) {
        const auto pf = workflows::pixel_features(imgs[i], spec);
        if (recipe && recipe->to_json() != pf.recipe.to_json()) {
            throw std::invalid_argument("image " + std::to_string(i) + " yields a different feature recipe");
        }
        recipe = pf.recipe;
        pixelclf::append_samples(samples, pixelclf::collect_samples(pf.data, lbls[i], &pf.recipe));
    }
    return pixelclf::train(samples, *recipe, opts);
}

py::tuple predict(const pixelclf::PixelClassifier& clf, const py::array& image, BackendPtr backend, int smooth_radius) {
    const auto img = image_arg(image);
    const auto& recipe = clf.recipe();
    workflows::FeatureSpec spec;
    spec.source = recipe.source;
    if (recipe.source != pixelclf::FeatureSource::classical) {
        const auto desc = BackendDescriptor::from_json(recipe.deep.at("backend"));
        if (!backend) backend = make_backend(desc.name, desc.patch_size, desc.stride);
        spec.backend = backend.get();
        spec.transforms = TransformSet::from_json(recipe.deep.at("transform_set"));
        spec.upsample.l2_normalize = recipe.deep.value("l2_normalize", false);
    }
    if (recipe.classical) spec.classical = *recipe.classical;
    pixelclf::Prediction p;
    {
        py::gil_scoped_release release;
        const auto pf = workflows::pixel_features(img, spec);
        p = clf.predict(pf.data, pf.recipe);
        if (smooth_radius > 0) p.labels = pixelclf::smooth(p.labels, p.probabilities, clf.classes(), smooth_radius);
    }
    return py::make_tuple(to_numpy(p.labels, true), to_numpy(p.probabilities));
}

py::dict unsupervised(BackendPtr backend, const py::array& image, std::optional<TransformSet> set, double lambda,
                      std::uint64_t seed, int clusters, std::optional<std::int64_t> min_area, int connectivity) {
    const auto img = image_arg(image);
    workflows::UnsupOptions opts;
    opts.cas.lambda = lambda;
    opts.cas.kmeans.seed = seed;
    opts.cas.kmeans.clusters = clusters;
    opts.min_area = min_area;
    opts.connectivity = connectivity;
    const auto ts = set ? *set : default_set(*backend);
    std::optional<workflows::UnsupResult> r;
    {
        py::gil_scoped_release release;
        r = workflows::run_unsupervised(*backend, img, ts, opts);
    }
    py::dict d;
    d["labels"] = to_numpy(r->cas.labels, true);
    d["saliency"] = to_numpy(r->detection.saliency, true);
    d["cas"] = to_py(r->cas.sidecar());
    d["superbox"] = r->detection.superbox ? to_py(detect::to_json(r->detection.superbox->box)) : py::none();
    py::list boxes;
    for (const auto& b : r->detection.boxes) {
        py::dict bd;
        bd["box"] = to_py(detect::to_json(b.box));
        bd["class"] = b.class_id;
        bd["area"] = b.area;
        bd["is_superbox"] = b.is_superbox;
        boxes.append(bd);
    }
    d["boxes"] = boxes;
    return d;
}

/// Jobs may call back into Python, so teardown must not hold the GIL.
struct ServerHandle {
    std::unique_ptr<serve::Server> server;
    ~ServerHandle() {
        py::gil_scoped_release release;
        server.reset();
    }
};

detect::BoxTable box_table(const py::dict& d) {
    detect::BoxTable t;
    for (const auto& [k, v] : d) {
        auto& boxes = t[k.cast<std::string>()];
        for (const auto& b : v) boxes.push_back(detect::box_from_json(from_py(b)));
    }
    return t;
}

}  // namespace

PYBIND11_MODULE(_featpipe, m) {
    m.doc() = "featpipe native core";

    py::register_exception<BackendError>(m, "BackendError", PyExc_RuntimeError);
    py::register_exception<pixelclf::PixelClfError>(m, "ClassifierError", PyExc_RuntimeError);
    py::register_exception<store::StoreError>(m, "StoreError", PyExc_RuntimeError);
    py::register_exception<FmapError>(m, "FmapError", PyExc_RuntimeError);
    py::register_exception<ImageDecodeError>(m, "ImageDecodeError", PyExc_ValueError);
    py::register_exception<serve::ConfigError>(m, "ConfigError", PyExc_ValueError);

    // ---- backends and transform sets
    py::class_<FeaturizerBackend, BackendPtr>(m, "Backend")
        .def_property_readonly("descriptor", [](const FeaturizerBackend& b) { return to_py(b.descriptor().to_json()); })
        .def_property_readonly("concurrent_safe", &FeaturizerBackend::concurrent_safe)
        .def(
            "featurize_patches",
            [](const FeaturizerBackend& b, const py::array& image) {
                const auto img = image_arg(image);
                PatchOutput po;
                {
                    py::gil_scoped_release release;
                    po = featurize_patches(b, img);
                }
                return py::make_tuple(to_numpy(po.features), to_numpy(po.attention, true));
            },
            py::arg("image"))
        .def("__repr__", [](const FeaturizerBackend& b) { return "<Backend " + b.descriptor().name + ">"; });

    m.def(
        "make_backend", [](const std::string& spec, int patch, int stride) -> BackendPtr { return make_backend(spec, patch, stride); },
        py::arg("spec"), py::arg("patch_size") = 4, py::arg("stride") = 4);
    m.def("callback_backend", &callback_backend, py::arg("descriptor"), py::arg("fn"), py::arg("concurrent_safe") = false);

    py::class_<TransformSet>(m, "TransformSet")
        .def_static(
            "standard",
            [](int stride, const std::string& neighborhood, std::vector<int> distances, bool flips) {
                return standard_transform_set(stride, neighborhood_from_string(neighborhood), distances, flips);
            },
            py::arg("stride"), py::arg("neighborhood") = "moore", py::arg("distances") = std::vector<int>{},
            py::arg("flips") = false)
        .def_static("identity", [] { return TransformSet(); })
        .def_static("from_json", [](const py::object& j) { return TransformSet::from_json(from_py(j)); })
        .def("to_json", [](const TransformSet& s) { return to_py(s.to_json()); })
        .def("__len__", &TransformSet::size);

    // ---- upsampling
    m.def(
        "upsample",
        [](BackendPtr backend, const py::array& image, std::optional<TransformSet> set, const std::string& mode,
           int workers, bool l2_normalize) {
            const auto img = image_arg(image);
            UpsampleOptions opts;
            opts.mode = upsample_mode_from_string(mode);
            opts.workers = workers;
            opts.l2_normalize = l2_normalize;
            const auto ts = set ? *set : default_set(*backend);
            std::optional<UpsampleResult> r;
            {
                py::gil_scoped_release release;
                r = workflows::upsample_native(*backend, img, ts, opts);
            }
            return py::make_tuple(to_numpy(r->features.data), to_numpy(r->attention.data, true));
        },
        py::arg("backend"), py::arg("image"), py::arg("transform_set") = py::none(), py::arg("mode") = "sequential",
        py::arg("workers") = 1, py::arg("l2_normalize") = false);
    m.def(
        "pca_rgb",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& features) {
            FeatureMap fm;
            fm.data = from_numpy<float>(features, "features");
            return to_numpy(pca_rgb(fm).rgb);
        },
        py::arg("features"));

    // ---- unsupervised detection
    m.def("unsupervised", &unsupervised, py::arg("backend"), py::arg("image"), py::arg("transform_set") = py::none(),
          py::arg("lambda_") = 1.0, py::arg("seed") = 0, py::arg("clusters") = 80, py::arg("min_area") = py::none(),
          py::arg("connectivity") = 8);
    m.def(
        "benchmark",
        [](const std::filesystem::path& root, BackendPtr backend, std::optional<TransformSet> set,
           const std::string& layout, bool single, double lambda, std::uint64_t seed, int clusters, bool strict) {
            const auto ts = set ? *set : default_set(*backend);
            workflows::BenchmarkOptions opts;
            opts.single = single;
            opts.unsup.cas.lambda = lambda;
            opts.unsup.cas.kmeans.seed = seed;
            opts.unsup.cas.kmeans.clusters = clusters;
            json report;
            {
                py::gil_scoped_release release;
                const auto ds = store::ingest(root, store::layout_from_string(layout), {strict});
                report = workflows::benchmark(ds, *backend, ts, opts).to_json();
            }
            return to_py(report);
        },
        py::arg("dataset"), py::arg("backend"), py::arg("transform_set") = py::none(), py::arg("layout") = "flat",
        py::arg("single") = true, py::arg("lambda_") = 1.0, py::arg("seed") = 0, py::arg("clusters") = 80,
        py::arg("strict") = false);

    // ---- metrics
    m.def(
        "box_iou", [](const py::object& a, const py::object& b) {
            return detect::iou(detect::box_from_json(from_py(a)), detect::box_from_json(from_py(b)));
        },
        py::arg("a"), py::arg("b"));
    m.def(
        "corloc", [](const py::dict& pred, const py::dict& gt) { return detect::corloc(box_table(pred), box_table(gt)); },
        py::arg("predictions"), py::arg("ground_truth"));
    m.def(
        "miou",
        [](const py::array& pred, const py::array& gt, const std::vector<int>& classes) {
            return detect::miou(labels_arg(pred), labels_arg(gt), classes);
        },
        py::arg("pred"), py::arg("truth"), py::arg("classes"));

    // ---- pixel classifiers
    py::class_<pixelclf::PixelClassifier>(m, "PixelClassifier")
        .def_property_readonly("kind", [](const pixelclf::PixelClassifier& c) { return pixelclf::to_string(c.kind()); })
        .def_property_readonly("classes", &pixelclf::PixelClassifier::classes)
        .def_property_readonly("recipe", [](const pixelclf::PixelClassifier& c) { return to_py(c.recipe().to_json()); })
        .def_property_readonly("recipe_checksum", [](const pixelclf::PixelClassifier& c) { return c.recipe().checksum(); })
        .def_property_readonly("training", [](const pixelclf::PixelClassifier& c) { return to_py(c.training()); })
        .def("save", &pixelclf::PixelClassifier::save, py::arg("path"))
        .def_static("load", &pixelclf::PixelClassifier::load, py::arg("path"))
        .def("to_bytes",
             [](const pixelclf::PixelClassifier& c) {
                 const auto b = c.serialize();
                 return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
             })
        .def_static("from_bytes", [](const py::bytes& b) {
            const std::string s = b;
            return pixelclf::PixelClassifier::deserialize(
                std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
        });
    m.def("train_classifier", &train_classifier, py::arg("images"), py::arg("labels"), py::arg("features") = "deep",
          py::arg("backend") = py::none(), py::arg("transform_set") = py::none(), py::arg("classifier") = py::none(),
          py::arg("c_reg") = 1.0, py::arg("trees") = 100, py::arg("seed") = 0, py::arg("max_iter") = 500,
          py::arg("workers") = 1, py::arg("sigmas") = py::none(), py::arg("per_channel") = false);
    m.def("predict", &predict, py::arg("classifier"), py::arg("image"), py::arg("backend") = py::none(),
          py::arg("smooth_radius") = 0);

    // ---- fixtures
    m.def("color_fixture", [](std::uint64_t seed, int size) { return fixture_dict(workflows::color_fixture(seed, size)); },
          py::arg("seed"), py::arg("size") = 128);
    m.def(
        "interiority_fixture",
        [](std::uint64_t seed, int size) { return fixture_dict(workflows::interiority_fixture(seed, size)); },
        py::arg("seed"), py::arg("size") = 128);
    m.def(
        "blob_image",
        [](std::uint64_t seed, int size) {
            const auto b = workflows::make_blob_image(seed, size);
            py::dict d;
            d["image"] = to_numpy(b.image);
            d["box"] = to_py(detect::to_json(b.box));
            d["mask"] = to_numpy(b.mask, true);
            return d;
        },
        py::arg("seed"), py::arg("size") = 128);
    m.def("write_blob_dataset", &workflows::write_blob_dataset, py::arg("directory"), py::arg("count"),
          py::arg("seed") = 1, py::arg("size") = 128);

    // ---- files
    m.def("read_image", [](const std::filesystem::path& p) { return to_numpy(read_image(p)); }, py::arg("path"));
    m.def("write_png", [](const std::filesystem::path& p, const py::array& img) { write_png(p, image_arg(img)); },
          py::arg("path"), py::arg("image"));
    m.def("read_labels", [](const std::filesystem::path& p) { return to_numpy(read_indexed_png(p), true); },
          py::arg("path"));
    m.def(
        "write_labels", [](const std::filesystem::path& p, const py::array& l) { write_indexed_png(p, labels_arg(l)); },
        py::arg("path"), py::arg("labels"));
    m.def(
        "read_fmap",
        [](const std::filesystem::path& p) {
            const auto r = read_fmap(p);
            return py::make_tuple(to_numpy(r.data), r.provenance ? to_py(*r.provenance) : py::none());
        },
        py::arg("path"));
    m.def(
        "write_fmap",
        [](const std::filesystem::path& p, const py::array_t<float, py::array::c_style | py::array::forcecast>& data,
           const py::object& provenance, bool f16) {
            const auto prov = from_py(provenance);
            write_fmap(p, from_numpy<float>(data, "data"), prov.is_null() ? nullptr : &prov,
                       f16 ? FmapDtype::f16 : FmapDtype::f32);
        },
        py::arg("path"), py::arg("data"), py::arg("provenance") = py::none(), py::arg("f16") = false);

    // ---- labelling service
    m.def(
        "load_config",
        [](std::optional<std::filesystem::path> file) { return to_py(serve::load_config(file).to_json()); },
        py::arg("path") = py::none());
    py::class_<ServerHandle>(m, "Server")
        .def(py::init([](const py::object& config, BackendPtr backend) {
                 const auto j = from_py(config);
                 auto h = std::make_unique<ServerHandle>();
                 h->server = std::make_unique<serve::Server>(
                     serve::ApiConfig::from_json(j.is_null() ? json::object() : j), std::move(backend));
                 return h;
             }),
             py::arg("config") = py::none(), py::arg("backend") = py::none())
        .def("start", [](ServerHandle& h) { return h.server->start(); }, py::call_guard<py::gil_scoped_release>())
        .def("stop", [](ServerHandle& h) { h.server->stop(); }, py::call_guard<py::gil_scoped_release>())
        .def_property_readonly("config", [](const ServerHandle& h) { return to_py(h.server->config().to_json()); });
}
