#include "gcd/dataio.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

namespace gcd {

namespace {

constexpr char kMagic[4] = {'G', 'C', 'D', 'E'};
constexpr std::uint32_t kVersion = 1;

// Metadata keys owned by the serializer, not the user map.
constexpr const char* kKeyKnown = "known_classes";
constexpr const char* kKeyDomain = "domain";

void put_u32(std::string& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
    if (pos + 4 > in.size()) throw Error(Err::MalformedHeader, "truncated header");
    std::uint32_t v;
    std::memcpy(&v, in.data() + pos, 4);
    pos += 4;
    return v;
}

std::string serialize_metadata(const Dataset& ds, Domain dom) {
    std::map<std::string, std::string> m = ds.metadata;
    std::string classes;
    for (int c : ds.known_classes) {
        if (!classes.empty()) classes += ',';
        classes += std::to_string(c);
    }
    m[kKeyKnown] = classes;
    m[kKeyDomain] = dom == Domain::Source ? "source" : "target";
    std::string out;
    for (const auto& [k, v] : m) {
        if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos ||
            v.find('\n') != std::string::npos)
            throw Error(Err::InvalidConfig, "metadata key/value contains reserved character");
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

void parse_metadata(const std::string& blob, Dataset& ds, Domain& dom) {
    std::istringstream in(blob);
    std::string line;
    dom = Domain::Target;
    while (std::getline(in, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) throw Error(Err::MalformedHeader, "bad metadata line");
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        if (key == kKeyKnown) {
            std::istringstream cs(val);
            std::string tok;
            while (std::getline(cs, tok, ','))
                if (!tok.empty()) ds.known_classes.insert(std::stoi(tok));
        } else if (key == kKeyDomain) {
            dom = val == "source" ? Domain::Source : Domain::Target;
        } else {
            ds.metadata[key] = val;
        }
    }
}

Dataset load_gcde(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(Err::IoFailure, "cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw Error(Err::MalformedHeader, "missing GCDE magic in " + path);
    std::size_t pos = 4;
    std::uint32_t version = get_u32(bytes, pos);
    if (version != kVersion)
        throw Error(Err::UnknownVersion, "unsupported GCDE version " + std::to_string(version));
    std::uint32_t n_samples = get_u32(bytes, pos);
    std::uint32_t n_patches = get_u32(bytes, pos);
    std::uint32_t patch_dim = get_u32(bytes, pos);
    if (pos + 1 > bytes.size()) throw Error(Err::MalformedHeader, "truncated header");
    std::uint8_t has_labels = static_cast<std::uint8_t>(bytes[pos++]);
    if (has_labels > 1) throw Error(Err::MalformedHeader, "bad has_labels flag");
    std::uint32_t meta_len = get_u32(bytes, pos);
    if (pos + meta_len > bytes.size()) throw Error(Err::MalformedHeader, "truncated metadata");
    std::string meta_blob = bytes.substr(pos, meta_len);
    pos += meta_len;
    if (n_patches == 0 || patch_dim == 0)
        throw Error(Err::MalformedHeader, "zero patch shape");

    Dataset ds;
    ds.n_patches = n_patches;
    ds.patch_dim = patch_dim;
    Domain dom;
    parse_metadata(meta_blob, ds, dom);

    std::size_t n_feats = std::size_t(n_samples) * n_patches * patch_dim;
    std::size_t want = n_feats * 4 + (has_labels ? std::size_t(n_samples) * 4 : 0);
    if (bytes.size() - pos != want) throw Error(Err::MalformedHeader, "payload size mismatch");

    ds.samples.resize(n_samples);
    for (std::uint32_t i = 0; i < n_samples; ++i) {
        Sample& s = ds.samples[i];
        s.domain = dom;
        s.patches = Mat(n_patches, patch_dim);
        for (std::size_t j = 0; j < std::size_t(n_patches) * patch_dim; ++j) {
            float v;
            std::memcpy(&v, bytes.data() + pos, 4);
            pos += 4;
            if (!std::isfinite(v)) throw Error(Err::NonFiniteValue, "non-finite feature value");
            s.patches.a[j] = v;
        }
    }
    if (has_labels) {
        for (std::uint32_t i = 0; i < n_samples; ++i) {
            std::int32_t lab;
            std::memcpy(&lab, bytes.data() + pos, 4);
            pos += 4;
            if (lab < -1) throw Error(Err::MalformedHeader, "label below -1");
            ds.samples[i].label = lab;
        }
    }
    ds.validate();
    return ds;
}

void save_gcde(const Dataset& ds, const std::string& path) {
    Domain dom = ds.samples.empty() ? Domain::Target : ds.samples.front().domain;
    for (const Sample& s : ds.samples)
        if (s.domain != dom)
            throw Error(Err::InvalidConfig, "mixed-domain dataset cannot be saved to one file");

    bool has_labels = std::any_of(ds.samples.begin(), ds.samples.end(),
                                  [](const Sample& s) { return s.label != kUnlabeled; });
    std::string meta = serialize_metadata(ds, dom);

    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(ds.samples.size()));
    put_u32(out, static_cast<std::uint32_t>(ds.n_patches));
    put_u32(out, static_cast<std::uint32_t>(ds.patch_dim));
    out.push_back(has_labels ? 1 : 0);
    put_u32(out, static_cast<std::uint32_t>(meta.size()));
    out += meta;
    for (const Sample& s : ds.samples) {
        for (double x : s.patches.a) {
            float v = static_cast<float>(x);
            char b[4];
            std::memcpy(b, &v, 4);
            out.append(b, 4);
        }
    }
    if (has_labels) {
        for (const Sample& s : ds.samples) {
            std::int32_t lab = s.label;
            char b[4];
            std::memcpy(b, &lab, 4);
            out.append(b, 4);
        }
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(Err::IoFailure, "cannot write " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error(Err::IoFailure, "write failed for " + path);
}

Dataset load_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error(Err::IoFailure, "cannot open " + path);
    std::string header;
    if (!std::getline(f, header)) throw Error(Err::MalformedHeader, "empty CSV");
    if (!header.empty() && header.back() == '\r') header.pop_back();

    std::vector<std::string> cols;
    {
        std::istringstream hs(header);
        std::string tok;
        while (std::getline(hs, tok, ',')) cols.push_back(tok);
    }
    if (cols.size() < 2 || cols.back() != "label")
        throw Error(Err::MalformedHeader, "CSV header must be f0,...,f{d-1},label");
    for (std::size_t i = 0; i + 1 < cols.size(); ++i)
        if (cols[i] != "f" + std::to_string(i))
            throw Error(Err::MalformedHeader, "unexpected CSV column " + cols[i]);
    std::size_t d = cols.size() - 1;

    Dataset ds;
    ds.n_patches = 1;
    ds.patch_dim = d;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tok;
        Sample s;
        s.patches = Mat(1, d);
        for (std::size_t i = 0; i < d; ++i) {
            if (!std::getline(ls, tok, ',')) throw Error(Err::MalformedHeader, "short CSV row");
            float v = std::strtof(tok.c_str(), nullptr);
            if (!std::isfinite(v)) throw Error(Err::NonFiniteValue, "non-finite CSV value");
            s.patches.a[i] = v;
        }
        if (!std::getline(ls, tok, ',')) throw Error(Err::MalformedHeader, "missing label column");
        s.label = std::stoi(tok);
        if (s.label < -1) throw Error(Err::MalformedHeader, "label below -1");
        ds.samples.push_back(std::move(s));
    }
    if (ds.samples.empty()) throw Error(Err::MalformedHeader, "CSV has no data rows");
    ds.validate();
    return ds;
}

void save_csv(const Dataset& ds, const std::string& path) {
    if (ds.n_patches != 1)
        throw Error(Err::InvalidConfig, "CSV supports flat embeddings only (n_patches=1)");
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error(Err::IoFailure, "cannot write " + path);
    for (std::size_t i = 0; i < ds.patch_dim; ++i) f << 'f' << i << ',';
    f << "label\n";
    char buf[40];
    for (const Sample& s : ds.samples) {
        for (double x : s.patches.a) {
            std::snprintf(buf, sizeof buf, "%.9g", static_cast<float>(x));
            f << buf << ',';
        }
        f << s.label << '\n';
    }
    if (!f) throw Error(Err::IoFailure, "write failed for " + path);
}

Vec random_unit(Rng& rng, std::size_t d) {
    std::normal_distribution<double> g;
    Vec v(d);
    double n;
    do {
        for (double& x : v) x = g(rng);
        n = norm2(v);
    } while (n < 1e-12);
    for (double& x : v) x /= n;
    return v;
}

// Rotation applied to consecutive coordinate pairs (0,1),(2,3),...
void apply_shift(Vec& x, const DomainShift& shift, const Vec& translation_dir,
                 double translation_scale) {
    double th = shift.rotation_deg * M_PI / 180.0;
    double c = std::cos(th), s = std::sin(th);
    for (std::size_t i = 0; i + 1 < x.size(); i += 2) {
        double a = x[i], b = x[i + 1];
        x[i] = c * a - s * b;
        x[i + 1] = s * a + c * b;
    }
    for (std::size_t i = 0; i < x.size(); ++i)
        x[i] = shift.scale * x[i] + shift.translation * translation_scale * translation_dir[i];
}

}  // namespace

Vec Dataset::pooled(std::size_t i) const {
    const Mat& p = samples[i].patches;
    Vec out(patch_dim, 0.0);
    for (std::size_t r = 0; r < p.rows; ++r)
        for (std::size_t c = 0; c < p.cols; ++c) out[c] += p(r, c);
    for (double& x : out) x /= static_cast<double>(p.rows);
    return out;
}

void Dataset::validate() const {
    if (n_patches < 1 || patch_dim < 1)
        throw Error(Err::ShapeMismatch, "dataset patch shape must be positive");
    for (const Sample& s : samples) {
        if (s.patches.rows != n_patches || s.patches.cols != patch_dim)
            throw Error(Err::ShapeMismatch, "sample patch shape differs from dataset shape");
        if (!all_finite(s.patches.a)) throw Error(Err::NonFiniteValue, "non-finite patch value");
        if (s.label < -1) throw Error(Err::LabelOutOfRange, "label below -1");
        if (s.domain == Domain::Source) {
            if (s.label == kUnlabeled)
                throw Error(Err::MissingLabels, "source sample without label");
            if (!known_classes.empty() && !known_classes.count(s.label))
                throw Error(Err::LabelOutOfRange, "source label outside known classes");
        }
    }
}

Dataset load_dataset(const std::string& path, FileFormat format) {
    return format == FileFormat::GCDE ? load_gcde(path) : load_csv(path);
}

void save_dataset(const Dataset& ds, const std::string& path, FileFormat format) {
    ds.validate();
    if (format == FileFormat::GCDE)
        save_gcde(ds, path);
    else
        save_csv(ds, path);
}

std::pair<Dataset, Dataset> generate_synthetic(const SyntheticConfig& cfg) {
    if (cfg.n_known < 1 || cfg.patch_dim < 1 || cfg.n_patches < 1 ||
        cfg.samples_per_class < 1 || cfg.class_sep <= 0.0 || cfg.noise_std < 0.0)
        throw Error(Err::InvalidConfig, "invalid synthetic config");

    std::size_t n_classes = cfg.n_known + cfg.n_novel;
    Rng structure = sub_rng(cfg.seed, 0);
    std::normal_distribution<double> g;

    // Class structure (means + per-class patch offsets) lives in the lower
    // half of the feature dimensions; the upper half carries high-variance
    // class-uncorrelated nuisance, mimicking backbone channels that track
    // style/background rather than category. Distance-based methods on raw
    // features are dominated by the nuisance; a supervised embedding learns
    // to suppress it.
    std::size_t d_signal = (cfg.patch_dim + 1) / 2;
    double mean_radius = cfg.class_sep * cfg.noise_std;
    double offset_std = 2.0 * cfg.noise_std;
    double nuisance_std = 2.0 * cfg.noise_std;
    std::vector<Vec> mean(n_classes);
    std::vector<std::vector<Vec>> offset(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) {
        Vec u = random_unit(structure, d_signal);
        mean[c] = Vec(cfg.patch_dim, 0.0);
        for (std::size_t j = 0; j < d_signal; ++j) mean[c][j] = u[j] * mean_radius;
        offset[c].resize(cfg.n_patches);
        for (std::size_t p = 0; p < cfg.n_patches; ++p) {
            offset[c][p] = Vec(cfg.patch_dim, 0.0);
            for (std::size_t j = 0; j < d_signal; ++j)
                offset[c][p][j] = offset_std * g(structure);
        }
    }
    Vec translation_dir = random_unit(structure, cfg.patch_dim);

    auto draw = [&](Rng& rng, std::size_t c, bool shifted) {
        Sample s;
        s.patches = Mat(cfg.n_patches, cfg.patch_dim);
        // Nuisance is drawn once per sample and shared by all patches, the
        // way style pervades a whole image; patch-level noise stays i.i.d.
        Vec nuisance(cfg.patch_dim, 0.0);
        for (std::size_t j = d_signal; j < cfg.patch_dim; ++j)
            nuisance[j] = nuisance_std * g(rng);
        for (std::size_t p = 0; p < cfg.n_patches; ++p) {
            Vec x(cfg.patch_dim);
            for (std::size_t j = 0; j < cfg.patch_dim; ++j)
                x[j] = mean[c][j] + offset[c][p][j] + nuisance[j] + cfg.noise_std * g(rng);
            if (shifted) apply_shift(x, cfg.shift, translation_dir, mean_radius);
            for (std::size_t j = 0; j < cfg.patch_dim; ++j)
                s.patches(p, j) = static_cast<float>(x[j]);  // quantize to on-disk precision
        }
        return s;
    };

    Dataset source, target;
    source.n_patches = target.n_patches = cfg.n_patches;
    source.patch_dim = target.patch_dim = cfg.patch_dim;
    for (std::size_t c = 0; c < cfg.n_known; ++c) {
        source.known_classes.insert(static_cast<int>(c));
        target.known_classes.insert(static_cast<int>(c));
    }

    Rng src_rng = sub_rng(cfg.seed, 1);
    for (std::size_t c = 0; c < cfg.n_known; ++c)
        for (std::size_t i = 0; i < cfg.samples_per_class; ++i) {
            Sample s = draw(src_rng, c, false);
            s.label = static_cast<int>(c);
            s.domain = Domain::Source;
            source.samples.push_back(std::move(s));
        }

    Rng tgt_rng = sub_rng(cfg.seed, 2);
    for (std::size_t c = 0; c < n_classes; ++c)
        for (std::size_t i = 0; i < cfg.samples_per_class; ++i) {
            Sample s = draw(tgt_rng, c, true);
            s.label = static_cast<int>(c);  // retained for evaluation only
            s.domain = Domain::Target;
            target.samples.push_back(std::move(s));
        }

    source.validate();
    target.validate();
    return {std::move(source), std::move(target)};
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_subsets(
    const Dataset& target, const std::set<int>& known) {
    std::vector<std::size_t> old_idx, new_idx;
    for (std::size_t i = 0; i < target.samples.size(); ++i) {
        int lab = target.samples[i].label;
        if (lab == kUnlabeled)
            throw Error(Err::MissingLabels, "split_subsets needs labeled target");
        (known.count(lab) ? old_idx : new_idx).push_back(i);
    }
    return {std::move(old_idx), std::move(new_idx)};
}

}  // namespace gcd
