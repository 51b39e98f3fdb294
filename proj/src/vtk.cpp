#include "liverperf/vtk.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace liverperf::vtk {

namespace {

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("vtk: cannot write " + path.string());
    return out;
}

void header(std::ostream& out, const std::string& title, const std::string& dataset) {
    out << "# vtk DataFile Version 3.0\n" << title << "\nASCII\nDATASET " << dataset << "\n";
}

void write_points(std::ostream& out, const std::vector<Vec3>& pts) {
    out << "POINTS " << pts.size() << " double\n";
    for (const Vec3& p : pts) out << num(p.x()) << ' ' << num(p.y()) << ' ' << num(p.z()) << '\n';
}

void write_fields(std::ostream& out, const char* section, std::size_t count, const std::vector<Field>& fields) {
    if (fields.empty()) return;
    out << section << ' ' << count << '\n';
    for (const Field& f : fields) {
        if (f.components != 1 && f.components != 3) throw Error("vtk: field " + f.name + " must have 1 or 3 components");
        if (f.values.size() != count * std::size_t(f.components))
            throw Error("vtk: field " + f.name + " has " + std::to_string(f.values.size()) + " values, expected " +
                        std::to_string(count * std::size_t(f.components)));
        if (f.name.empty() || f.name.find_first_of(" \t\n") != std::string::npos)
            throw Error("vtk: invalid field name '" + f.name + "'");
        if (f.components == 1) out << "SCALARS " << f.name << " double 1\nLOOKUP_TABLE default\n";
        else out << "VECTORS " << f.name << " double\n";
        for (std::size_t k = 0; k < count; ++k) {
            for (int c = 0; c < f.components; ++c)
                out << (c ? " " : "") << num(f.values[k * std::size_t(f.components) + std::size_t(c)]);
            out << '\n';
        }
    }
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
    out.flush();
    if (!out) throw Error("vtk: write failed for " + path.string());
}

class Tokens {
public:
    Tokens(std::istream& in, std::filesystem::path path) : in_(in), path_(std::move(path)) {}

    bool next(std::string& tok) { return bool(in_ >> tok); }
    std::string word() {
        std::string t;
        if (!next(t)) fail("unexpected end of file");
        return t;
    }
    void expect(const std::string& w) {
        const std::string t = word();
        if (t != w) fail("expected '" + w + "', found '" + t + "'");
    }
    double real() {
        const std::string t = word();
        try {
            std::size_t used = 0;
            const double v = std::stod(t, &used);
            if (used != t.size()) throw std::invalid_argument(t);
            return v;
        } catch (const std::exception&) {
            fail("expected a number, found '" + t + "'");
        }
        return 0.0;
    }
    long long integer() {
        const std::string t = word();
        try {
            std::size_t used = 0;
            const long long v = std::stoll(t, &used);
            if (used != t.size()) throw std::invalid_argument(t);
            return v;
        } catch (const std::exception&) {
            fail("expected an integer, found '" + t + "'");
        }
        return 0;
    }
    [[noreturn]] void fail(const std::string& what) const { throw Error("vtk: " + path_.string() + ": " + what); }

private:
    std::istream& in_;
    std::filesystem::path path_;
};

std::vector<Field> read_fields(Tokens& tok, std::size_t count, std::string& pending) {
    std::vector<Field> out;
    std::string t;
    while (tok.next(t)) {
        if (t == "SCALARS") {
            Field f;
            f.name = tok.word();
            tok.word();  // type
            const std::string maybe = tok.word();
            if (maybe == "LOOKUP_TABLE") {
                tok.word();
            } else {
                if (maybe != "1") tok.fail("only single-component SCALARS are supported");
                tok.expect("LOOKUP_TABLE");
                tok.word();
            }
            f.values.resize(count);
            for (double& v : f.values) v = tok.real();
            out.push_back(std::move(f));
        } else if (t == "VECTORS") {
            Field f;
            f.name = tok.word();
            f.components = 3;
            tok.word();
            f.values.resize(3 * count);
            for (double& v : f.values) v = tok.real();
            out.push_back(std::move(f));
        } else {
            pending = t;
            return out;
        }
    }
    pending.clear();
    return out;
}

const Field& find(const std::vector<Field>& fields, const std::string& name, const char* kind) {
    for (const Field& f : fields)
        if (f.name == name) return f;
    throw Error(std::string("vtk: no ") + kind + " field named " + name);
}

}  // namespace

Field Field::vectors(std::string name, const std::vector<Vec3>& v) {
    Field f{std::move(name), 3, {}};
    f.values.reserve(3 * v.size());
    for (const Vec3& x : v) f.values.insert(f.values.end(), {x.x(), x.y(), x.z()});
    return f;
}

const Field& UnstructuredGrid::point_field(const std::string& name) const { return find(point_data, name, "point"); }
const Field& UnstructuredGrid::cell_field(const std::string& name) const { return find(cell_data, name, "cell"); }

void write_unstructured(const std::filesystem::path& path, const UnstructuredGrid& grid, const std::string& title) {
    const auto& m = grid.mesh;
    std::ofstream out = open_out(path);
    header(out, title, "UNSTRUCTURED_GRID");
    write_points(out, m.vertices);
    out << "CELLS " << m.tets.size() << ' ' << 5 * m.tets.size() << '\n';
    for (const auto& t : m.tets) out << "4 " << t[0] << ' ' << t[1] << ' ' << t[2] << ' ' << t[3] << '\n';
    out << "CELL_TYPES " << m.tets.size() << '\n';
    for (std::size_t k = 0; k < m.tets.size(); ++k) out << "10\n";
    write_fields(out, "CELL_DATA", m.tets.size(), grid.cell_data);
    write_fields(out, "POINT_DATA", m.vertices.size(), grid.point_data);
    finish(out, path);
}

UnstructuredGrid read_unstructured(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("vtk: cannot read " + path.string());
    std::string line;
    std::getline(in, line);
    if (line.rfind("# vtk DataFile Version", 0) != 0) throw Error("vtk: " + path.string() + " is not a legacy VTK file");
    std::getline(in, line);  // title
    Tokens tok(in, path);
    tok.expect("ASCII");
    tok.expect("DATASET");
    tok.expect("UNSTRUCTURED_GRID");

    UnstructuredGrid g;
    tok.expect("POINTS");
    const long long np = tok.integer();
    tok.word();
    if (np < 0) tok.fail("negative point count");
    g.mesh.vertices.resize(std::size_t(np));
    for (Vec3& p : g.mesh.vertices)
        for (int a = 0; a < 3; ++a) p[a] = tok.real();
    tok.expect("CELLS");
    const long long nc = tok.integer();
    tok.integer();
    if (nc < 0) tok.fail("negative cell count");
    g.mesh.tets.resize(std::size_t(nc));
    for (auto& t : g.mesh.tets) {
        if (tok.integer() != 4) tok.fail("only tetra cells are supported");
        for (int& v : t) {
            const long long x = tok.integer();
            if (x < 0 || x >= np) tok.fail("cell references point " + std::to_string(x));
            v = int(x);
        }
    }
    tok.expect("CELL_TYPES");
    if (tok.integer() != nc) tok.fail("CELL_TYPES count differs from CELLS");
    for (long long k = 0; k < nc; ++k)
        if (tok.integer() != 10) tok.fail("only tetra cells (type 10) are supported");

    std::string t;
    bool more = tok.next(t);
    while (more) {
        if (t == "CELL_DATA" || t == "POINT_DATA") {
            const long long n = tok.integer();
            const bool cell = t == "CELL_DATA";
            if (n != (cell ? nc : np)) tok.fail(t + " count mismatch");
            std::string pending;
            auto fields = read_fields(tok, std::size_t(n), pending);
            auto& dest = cell ? g.cell_data : g.point_data;
            for (auto& f : fields) dest.push_back(std::move(f));
            t = pending;
            more = !pending.empty();
        } else {
            tok.fail("unexpected '" + t + "'");
        }
    }
    return g;
}

void write_surface(const std::filesystem::path& path, const mesh::SurfaceMesh& surface, const std::string& title) {
    std::ofstream out = open_out(path);
    header(out, title, "POLYDATA");
    write_points(out, surface.vertices);
    out << "POLYGONS " << surface.triangles.size() << ' ' << 4 * surface.triangles.size() << '\n';
    for (const auto& t : surface.triangles) out << "3 " << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
    finish(out, path);
}

void write_tree(const std::filesystem::path& path, const tree::VascularTree& t, const std::string& title) {
    std::ofstream out = open_out(path);
    header(out, title, "POLYDATA");
    std::vector<Vec3> pts;
    pts.reserve(t.nodes.size());
    for (const auto& n : t.nodes) pts.push_back(n.position);
    write_points(out, pts);
    out << "LINES " << t.edges.size() << ' ' << 3 * t.edges.size() << '\n';
    for (const auto& e : t.edges) out << "2 " << e.parent << ' ' << e.child << '\n';
    std::vector<double> radius, flow;
    for (const auto& e : t.edges) {
        radius.push_back(e.radius);
        flow.push_back(e.flow);
    }
    write_fields(out, "CELL_DATA", t.edges.size(), {Field::scalars("radius", radius), Field::scalars("flow", flow)});
    finish(out, path);
}

}  // namespace liverperf::vtk
