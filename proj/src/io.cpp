#include "propdec/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace propdec {

std::string fmt_double(double x, int precision) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", precision, x);
    return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << content;
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    for (size_t i = 0; i < header.size(); ++i) {
        if (i) f << ",";
        f << header[i];
    }
    f << "\n";
    for (const auto& row : rows) {
        for (size_t i = 0; i < row.size(); ++i) {
            if (i) f << ",";
            f << row[i];
        }
        f << "\n";
    }
}

void write_pgm(const Mat& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    double lo = m.data[0], hi = m.data[0];
    for (double x : m.data) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    double span = hi > lo ? hi - lo : 1.0;
    f << "P5\n" << m.cols << " " << m.rows << "\n255\n";
    for (double x : m.data) {
        unsigned char px = (unsigned char)std::lround(255.0 * (x - lo) / span);
        f.write(reinterpret_cast<char*>(&px), 1);
    }
}

void write_svg_heatmap(const Mat& m, const std::vector<std::string>& labels,
                       const std::string& path) {
    const int cell = 18, margin = 90;
    const int w = margin + m.cols * cell + 10;
    const int h = margin + m.rows * cell + 10;
    double lo = m.data[0], hi = m.data[0];
    for (double x : m.data) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    double span = hi > lo ? hi - lo : 1.0;
    std::ostringstream s;
    s << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
    s << "<rect width='100%' height='100%' fill='white'/>\n";
    for (int i = 0; i < m.rows; ++i) {
        for (int j = 0; j < m.cols; ++j) {
            int v = int(std::lround(255.0 * (m.at(i, j) - lo) / span));
            s << "<rect x='" << margin + j * cell << "' y='" << margin + i * cell
              << "' width='" << cell << "' height='" << cell << "' fill='rgb(" << 255 - v << ","
              << 255 - v << ",255)'/>\n";
        }
    }
    for (size_t i = 0; i < labels.size() && int(i) < m.rows; ++i) {
        s << "<text x='" << margin - 4 << "' y='" << margin + int(i) * cell + cell - 5
          << "' font-size='10' text-anchor='end' font-family='monospace'>" << labels[i]
          << "</text>\n";
        s << "<text x='" << margin + int(i) * cell + cell / 2 << "' y='" << margin - 6
          << "' font-size='10' text-anchor='start' font-family='monospace' "
          << "transform='rotate(-60 " << margin + int(i) * cell + cell / 2 << " " << margin - 6
          << ")'>" << labels[i] << "</text>\n";
    }
    s << "</svg>\n";
    write_text_file(path, s.str());
}

void write_matrix_csv(const Mat& m, const std::string& path,
                      const std::vector<std::string>& labels) {
    std::vector<std::string> header;
    header.push_back("token");
    for (int j = 0; j < m.cols; ++j)
        header.push_back(labels.empty() ? "c" + std::to_string(j) : labels[size_t(j)]);
    std::vector<std::vector<std::string>> rows;
    for (int i = 0; i < m.rows; ++i) {
        std::vector<std::string> row;
        row.push_back(labels.empty() ? "r" + std::to_string(i) : labels[size_t(i)]);
        for (int j = 0; j < m.cols; ++j) row.push_back(fmt_double(m.at(i, j)));
        rows.push_back(std::move(row));
    }
    write_csv(path, header, rows);
}

namespace {
void put_u32(std::ofstream& f, uint32_t x) {
    unsigned char b[4] = {(unsigned char)x, (unsigned char)(x >> 8), (unsigned char)(x >> 16),
                          (unsigned char)(x >> 24)};
    f.write(reinterpret_cast<char*>(b), 4);
}
uint32_t get_u32(std::ifstream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}
void put_u64(std::ofstream& f, uint64_t x) {
    for (int i = 0; i < 8; ++i) {
        unsigned char b = (unsigned char)(x >> (8 * i));
        f.write(reinterpret_cast<char*>(&b), 1);
    }
}
uint64_t get_u64(std::ifstream& f) {
    uint64_t x = 0;
    for (int i = 0; i < 8; ++i) {
        unsigned char b;
        f.read(reinterpret_cast<char*>(&b), 1);
        x |= uint64_t(b) << (8 * i);
    }
    return x;
}
} // namespace

void save_tensor(const Mat& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write("PDTN", 4);
    put_u32(f, 1);
    put_u32(f, uint32_t(m.rows));
    put_u32(f, uint32_t(m.cols));
    for (double x : m.data) {
        float v = float(x);
        f.write(reinterpret_cast<char*>(&v), 4);
    }
}

Mat load_tensor(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (std::string(magic, 4) != "PDTN") throw std::runtime_error("bad tensor magic");
    if (get_u32(f) != 1) throw std::runtime_error("unsupported tensor version");
    int rows = int(get_u32(f)), cols = int(get_u32(f));
    Mat m(rows, cols);
    for (double& x : m.data) {
        float v;
        f.read(reinterpret_cast<char*>(&v), 4);
        x = v;
    }
    if (!f) throw std::runtime_error("truncated tensor file");
    return m;
}

// "PDAC" | version | n_layers | seq | d | index[(layer,pos,offset)] | f32 data
// | per_layer_scale f64
void save_activation_dump(const ActivationCache& cache, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write("PDAC", 4);
    put_u32(f, 1);
    put_u32(f, uint32_t(cache.n_layers));
    put_u32(f, uint32_t(cache.seq));
    put_u32(f, uint32_t(cache.d));
    uint64_t data_start = 4 + 4 + 12 + uint64_t(cache.n_layers) * cache.seq * 16;
    for (int l = 0; l < cache.n_layers; ++l)
        for (int s = 0; s < cache.seq; ++s) {
            put_u32(f, uint32_t(l));
            put_u32(f, uint32_t(s));
            put_u64(f, data_start + (uint64_t(l) * cache.seq + s) * cache.d * 4);
        }
    for (int l = 0; l < cache.n_layers; ++l)
        for (double x : cache.z[size_t(l)].data) {
            float v = float(x);
            f.write(reinterpret_cast<char*>(&v), 4);
        }
    for (double s : cache.per_layer_scale) f.write(reinterpret_cast<const char*>(&s), 8);
}

ActivationCache load_activation_dump(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (std::string(magic, 4) != "PDAC") throw std::runtime_error("bad activation magic");
    if (get_u32(f) != 1) throw std::runtime_error("unsupported activation version");
    ActivationCache cache;
    cache.n_layers = int(get_u32(f));
    cache.seq = int(get_u32(f));
    cache.d = int(get_u32(f));
    for (int i = 0; i < cache.n_layers * cache.seq; ++i) {
        get_u32(f);
        get_u32(f);
        get_u64(f);
    }
    cache.z.assign(size_t(cache.n_layers), Mat(cache.seq, cache.d));
    for (int l = 0; l < cache.n_layers; ++l)
        for (double& x : cache.z[size_t(l)].data) {
            float v;
            f.read(reinterpret_cast<char*>(&v), 4);
            x = v;
        }
    cache.per_layer_scale.assign(size_t(cache.n_layers), 0.0);
    for (double& s : cache.per_layer_scale) f.read(reinterpret_cast<char*>(&s), 8);
    if (!f) throw std::runtime_error("truncated activation dump");
    return cache;
}

} // namespace propdec
