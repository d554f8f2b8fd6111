#pragma once

// File emitters: CSV tables, PGM / SVG heatmaps, the shared binary tensor
// format used for activation dumps and Hessians.

#include <string>
#include <vector>

#include "propdec/model.hpp"

namespace propdec {

std::string fmt_double(double x, int precision = 6);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

// rows are pre-formatted cells; the header is fixed by the caller
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

// grayscale PGM (P5), min-max normalized
void write_pgm(const Mat& m, const std::string& path);

// heatmap with token labels on both axes
void write_svg_heatmap(const Mat& m, const std::vector<std::string>& labels,
                       const std::string& path);

void write_matrix_csv(const Mat& m, const std::string& path,
                      const std::vector<std::string>& labels = {});

// "PDTN": little-endian f32 tensor with explicit dims
void save_tensor(const Mat& m, const std::string& path);
Mat load_tensor(const std::string& path);

// activation dump: shared tensor encoding plus a (layer, position) offset index
void save_activation_dump(const ActivationCache& cache, const std::string& path);
ActivationCache load_activation_dump(const std::string& path);

} // namespace propdec
