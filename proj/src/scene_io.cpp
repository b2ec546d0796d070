/*
    src/scene_io.cpp -- Scene description parser and PFM images
*/

#include <tracejit/render.hpp>

#include <cstring>
#include <fstream>
#include <sstream>

namespace tj::render {

namespace {

struct LineReader {
    std::istringstream in;
    size_t line;
    std::string keyword;

    [[noreturn]] void fail(const std::string &msg) const {
        throw StructuralError("scene line " + std::to_string(line) + ": " + msg);
    }

    double num() {
        std::string tok;
        if (!(in >> tok))
            fail("'" + keyword + "' expects more values");
        try {
            size_t pos = 0;
            double v = std::stod(tok, &pos);
            if (pos != tok.size())
                throw std::invalid_argument(tok);
            return v;
        } catch (const std::exception &) {
            fail("expected a number, got '" + tok + "'");
        }
    }

    uint32_t count() {
        double v = num();
        if (v < 1 || v != (double) (uint32_t) v)
            fail("expected a positive integer");
        return (uint32_t) v;
    }

    Vec3d vec() { return { num(), num(), num() }; }

    std::string word() {
        std::string tok;
        if (!(in >> tok))
            fail("'" + keyword + "' expects a name");
        return tok;
    }

    void end() {
        std::string tok;
        if (in >> tok)
            fail("unexpected trailing token '" + tok + "'");
    }
};

} // namespace

std::unique_ptr<Scene> parse_scene(Context &ctx, const std::string &text) {
    auto scene = std::make_unique<Scene>(ctx);
    std::istringstream src(text);
    std::string raw;
    size_t lineno = 0;
    while (std::getline(src, raw)) {
        ++lineno;
        if (auto hash = raw.find('#'); hash != std::string::npos)
            raw.resize(hash);
        LineReader r{ std::istringstream(raw), lineno, {} };
        if (!(r.in >> r.keyword))
            continue;
        try {
            if (r.keyword == "camera") {
                scene->camera.origin = r.vec();
                scene->camera.scale = r.num();
            } else if (r.keyword == "emitter") {
                scene->set_emitter(r.num());
            } else if (r.keyword == "bsdf") {
                std::string name = r.word(), kind = r.word();
                if (kind == "diffuse") {
                    scene->add_diffuse(name, r.num());
                } else if (kind == "diffuse_tex" || kind == "phong") {
                    uint32_t w = r.count(), h = r.count();
                    double e = kind == "phong" ? r.num() : 0.0;
                    std::vector<double> tex(size_t(w) * h);
                    for (double &t : tex)
                        t = r.num();
                    if (kind == "phong")
                        scene->add_phong(name, w, h, tex, e);
                    else
                        scene->add_diffuse_texture(name, w, h, tex);
                } else {
                    r.fail("unknown bsdf kind '" + kind + "'");
                }
            } else if (r.keyword == "sphere") {
                Vec3d c = r.vec();
                double rad = r.num();
                scene->add_sphere(c, rad, r.word());
            } else if (r.keyword == "quad") {
                Vec3d a = r.vec(), b = r.vec(), c = r.vec(), d = r.vec();
                scene->add_quad(a, b, c, d, r.word());
            } else {
                r.fail("unknown keyword '" + r.keyword + "'");
            }
            r.end();
        } catch (const StructuralError &e) {
            if (std::strncmp(e.what(), "scene line", 10) == 0)
                throw;
            r.fail(e.what());
        } catch (const ShapeError &e) {
            r.fail(e.what());
        }
    }
    scene->finalize();
    return scene;
}

std::unique_ptr<Scene> load_scene(Context &ctx, const std::string &path) {
    std::ifstream f(path);
    if (!f)
        throw StructuralError("cannot open scene file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_scene(ctx, ss.str());
}

// Grayscale PFM: "Pf", dimensions, negative scale for little endian, rows
// stored bottom to top
void write_pfm(const std::string &path, const std::vector<double> &pixels, uint32_t width,
               uint32_t height) {
    if (pixels.size() != size_t(width) * height)
        throw ShapeError("write_pfm: pixel count does not match the resolution");
    std::ofstream f(path, std::ios::binary);
    if (!f)
        throw StructuralError("cannot write '" + path + "'");
    f << "Pf\n" << width << " " << height << "\n-1.0\n";
    for (uint32_t y = height; y-- > 0;)
        for (uint32_t x = 0; x < width; ++x) {
            float v = (float) pixels[size_t(y) * width + x];
            f.write(reinterpret_cast<const char *>(&v), sizeof(v));
        }
}

std::vector<double> read_pfm(const std::string &path, uint32_t &width, uint32_t &height) {
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw StructuralError("cannot open '" + path + "'");
    std::string magic;
    double scale;
    f >> magic >> width >> height >> scale;
    if (magic != "Pf" || !f || scale >= 0)
        throw StructuralError("'" + path + "' is not a little-endian grayscale PFM");
    f.get();
    std::vector<double> px(size_t(width) * height);
    for (uint32_t y = height; y-- > 0;)
        for (uint32_t x = 0; x < width; ++x) {
            float v;
            if (!f.read(reinterpret_cast<char *>(&v), sizeof(v)))
                throw StructuralError("'" + path + "' is truncated");
            px[size_t(y) * width + x] = v;
        }
    return px;
}

} // namespace tj::render
