#include "fgd/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fgd {
namespace {

constexpr char kMagic[8] = {'F', 'G', 'D', 'N', 'T', '0', '0', '1'};
static_assert(std::endian::native == std::endian::little, "binary tensor files assume a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& is, const std::filesystem::path& path) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError(path.string() + ": truncated tensor file");
    return v;
}

std::filesystem::path with_ext(std::filesystem::path stem, const char* ext) {
    stem += ext;
    return stem;
}

}  // namespace

void write_named_tensors(const std::filesystem::path& path, const NamedTensorList& tensors) {
    std::ostringstream os(std::ios::binary);
    os.write(kMagic, sizeof kMagic);
    put<std::uint64_t>(os, tensors.size());
    for (const auto& [name, t] : tensors) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
        for (auto d : t.shape()) put<std::uint64_t>(os, d);
        os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    write_text(path, os.str());
}

NamedTensorList read_named_tensors(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(path.string() + ": cannot open");
    char magic[8];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw IoError(path.string() + ": not a named-tensor file");
    }
    const auto count = get<std::uint64_t>(is, path);
    NamedTensorList out;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = get<std::uint32_t>(is, path);
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw IoError(path.string() + ": truncated tensor name");
        const auto rank = get<std::uint32_t>(is, path);
        Shape shape(rank);
        for (auto& d : shape) d = get<std::uint64_t>(is, path);
        Tensor t(shape);
        if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
            throw IoError(path.string() + ": truncated data for tensor '" + name + "'");
        }
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

std::pair<std::filesystem::path, std::filesystem::path> save_dataset(const std::filesystem::path& stem,
                                                                     const LabeledDataset& data, const GpSpec& spec) {
    const auto bin = with_ext(stem, ".bin");
    const auto sidecar = with_ext(stem, ".json");
    write_named_tensors(bin, {{"x", data.x}, {"y", data.y}});

    nlohmann::ordered_json j;
    j["schema"] = kDatasetSchema;
    j["tensors"] = bin.filename().string();
    j["spec"] = {{"length_scales", spec.length_scales},
                 {"amplitudes", spec.amplitudes},
                 {"length", spec.length},
                 {"samples", spec.samples},
                 {"seed", spec.seed}};
    j["thresholds"] = {{"kappa12", data.kappa12}, {"kappa34", data.kappa34}};
    nlohmann::ordered_json groups = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < data.ground_truth.clusters(); ++k) groups.push_back(data.ground_truth.members(k));
    j["ground_truth_groups"] = groups;
    write_text(sidecar, j.dump(2) + "\n");
    return {bin, sidecar};
}

LabeledDataset load_dataset(const std::filesystem::path& stem) {
    const auto sidecar = with_ext(stem, ".json");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(sidecar));
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError(sidecar.string() + ": " + e.what());
    }
    if (j.value("schema", "") != kDatasetSchema) throw IoError(sidecar.string() + ": unexpected schema");

    LabeledDataset d;
    for (auto& [name, t] : read_named_tensors(sidecar.parent_path() / j.at("tensors").get<std::string>())) {
        if (name == "x") d.x = std::move(t);
        else if (name == "y") d.y = std::move(t);
    }
    if (d.x.ndim() != 3 || d.y.ndim() != 1 || d.y.size() != d.x.shape()[0]) {
        throw IoError(stem.string() + ": dataset tensors have inconsistent shapes");
    }
    d.kappa12 = j.at("thresholds").at("kappa12").get<double>();
    d.kappa34 = j.at("thresholds").at("kappa34").get<double>();
    const auto groups = j.at("ground_truth_groups").get<std::vector<std::vector<std::size_t>>>();
    d.ground_truth = MembershipMatrix(d.features(), groups.size());
    for (std::size_t k = 0; k < groups.size(); ++k)
        for (auto f : groups[k]) {
            if (f >= d.features()) throw IoError(sidecar.string() + ": ground-truth feature index out of range");
            d.ground_truth.set(f, k, true);
        }
    return d;
}

void export_dataset_csv(const std::filesystem::path& path, const LabeledDataset& data) {
    std::ostringstream os;
    os.precision(17);
    os << "# schema: " << kDatasetSchema << "\nsample,step";
    for (std::size_t f = 0; f < data.features(); ++f) os << ",x" << f;
    os << ",y\n";
    for (std::size_t i = 0; i < data.samples(); ++i)
        for (std::size_t t = 0; t < data.steps(); ++t) {
            os << i << ',' << t;
            for (std::size_t f = 0; f < data.features(); ++f)
                os << ',' << data.x[(i * data.steps() + t) * data.features() + f];
            os << ',' << data.y[i] << '\n';
        }
    write_text(path, os.str());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError(path.string() + ": cannot open for writing");
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!os) throw IoError(path.string() + ": write failed");
    }
    std::filesystem::rename(tmp, path);
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(path.string() + ": cannot open");
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace fgd
