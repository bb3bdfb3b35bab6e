#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "nisqa/common.hpp"
#include "nisqa/model.hpp"

namespace nisqa {

// One labeled file. condition_id < 0 means "no condition information".
struct ManifestRow {
    std::string filepath;
    long condition_id = -1;
    QualityScores labels;
    std::string dataset_name = "default";
};

struct DatasetManifest {
    std::vector<ManifestRow> rows;
};

inline const char* kManifestHeader = "filepath,condition_id,mos,noi,col,dis,lou,dataset_name";

inline void write_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write manifest: " + path);
    out << kManifestHeader << '\n';
    for (const auto& r : m.rows) {
        out << r.filepath << ',' << r.condition_id << ',' << r.labels.mos << ',' << r.labels.noi << ','
            << r.labels.col << ',' << r.labels.dis << ',' << r.labels.lou << ',' << r.dataset_name << '\n';
    }
}

inline DatasetManifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest: " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty manifest: " + path);
    DatasetManifest m;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() < 8)
            throw DataError("manifest " + path + ": bad row at line " + std::to_string(lineno));
        ManifestRow r;
        r.filepath = fields[0];
        r.condition_id = std::stol(fields[1]);
        r.labels.mos = std::stod(fields[2]);
        r.labels.noi = std::stod(fields[3]);
        r.labels.col = std::stod(fields[4]);
        r.labels.dis = std::stod(fields[5]);
        r.labels.lou = std::stod(fields[6]);
        r.dataset_name = fields[7];
        m.rows.push_back(std::move(r));
    }
    return m;
}

}  // namespace nisqa
