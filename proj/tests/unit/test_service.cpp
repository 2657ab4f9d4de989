#include <doctest.h>

#include <httplib.h>

#include <atomic>
#include <json.hpp>
#include <thread>

#include "confseg/service.hpp"
#include "helpers.hpp"

using namespace confseg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Data dir with two images: "alpha" (8x6) and "beta" (4x4).
fs::path make_data_dir(const std::string& name) {
    const auto dir = testutil::temp_dir(name);
    fs::create_directories(dir / "images");
    GrayImage a(8, 6);
    for (std::size_t i = 0; i < a.pixels.size(); ++i) a.pixels[i] = static_cast<std::uint8_t>(i * 5);
    save_pgm(dir / "images" / "alpha.pgm", a);
    save_pgm(dir / "images" / "beta.pgm", GrayImage(4, 4));
    write_text_file(dir / "images" / "notes.txt", "ignored");
    return dir;
}

struct Running {
    explicit Running(const fs::path& data, const fs::path& static_dir = {})
        : server(ServiceConfig{data, static_dir, "127.0.0.1", 0}) {
        port = server.bind();
        thread = std::thread([this] { server.listen(); });
        server.wait_until_ready();
    }
    ~Running() {
        server.stop();
        thread.join();
    }
    httplib::Client client() const {
        httplib::Client c("127.0.0.1", port);
        c.set_read_timeout(30, 0);
        return c;
    }

    AnnotationServer server;
    int port = 0;
    std::thread thread;
};

std::string body_of(const std::vector<std::uint8_t>& bytes) { return {bytes.begin(), bytes.end()}; }
std::vector<std::uint8_t> bytes_of(const std::string& body) { return {body.begin(), body.end()}; }

ConfidenceMap filled(std::size_t w, std::size_t h, int v) {
    return ConfidenceMap(w, h, std::vector<std::uint8_t>(kChannels * w * h, static_cast<std::uint8_t>(v)));
}

}  // namespace

TEST_CASE("image ids") {
    CHECK(valid_image_id("P001_d0_R1"));
    CHECK(valid_image_id("a-b"));
    CHECK_FALSE(valid_image_id(""));
    CHECK_FALSE(valid_image_id("../etc"));
    CHECK_FALSE(valid_image_id("a.b"));
    CHECK_FALSE(valid_image_id(std::string(65, 'x')));
    CHECK(valid_image_id(std::string(64, 'x')));
}

TEST_CASE("listing, metadata, raw frames and channels") {
    const auto dir = make_data_dir("svc_list");
    Running run(dir);
    auto c = run.client();

    auto res = c.Get("/api/images");
    REQUIRE(res);
    CHECK(res->status == 200);
    const auto list = json::parse(res->body);
    REQUIRE(list.size() == 2);
    CHECK(list[0]["id"] == "alpha");
    CHECK(list[0]["width"] == 8);
    CHECK(list[0]["height"] == 6);
    CHECK(list[0]["has_label"] == false);
    CHECK(list[1]["id"] == "beta");

    res = c.Get("/api/images/alpha/meta");
    REQUIRE(res);
    CHECK(json::parse(res->body)["revision"] == 0);

    res = c.Get("/api/images/alpha/raw");
    REQUIRE(res);
    CHECK(decode_pgm(bytes_of(res->body)) == load_pgm(dir / "images" / "alpha.pgm"));

    res = c.Get("/api/channels");
    REQUIRE(res);
    const auto ch = json::parse(res->body);
    REQUIRE(ch["channels"].size() == 6);
    CHECK(ch["channels"][5] == "vertical_line");
    CHECK(ch["levels"] == json::array({0, 20, 40, 50, 60, 80, 100}));
}

TEST_CASE("unknown ids are 404 with a JSON reason") {
    const auto dir = make_data_dir("svc_404");
    Running run(dir);
    auto c = run.client();
    for (const char* path : {"/api/images/gamma/meta", "/api/images/gamma/raw", "/api/labels/gamma", "/api/labels/..%2Fx"}) {
        const auto res = c.Get(path);
        REQUIRE(res);
        CHECK(res->status == 404);
    }
    const auto res = c.Put("/api/labels/gamma", body_of(encode_cmap(ConfidenceMap(8, 6))), "application/octet-stream");
    REQUIRE(res);
    CHECK(res->status == 404);
    CHECK(json::parse(res->body)["error"] == "unknown image id");
}

TEST_CASE("unlabelled images return an all-zero map") {
    const auto dir = make_data_dir("svc_zero");
    Running run(dir);
    auto c = run.client();
    const auto res = c.Get("/api/labels/alpha");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(decode_cmap(bytes_of(res->body)) == ConfidenceMap(8, 6));
    CHECK(res->get_header_value("X-Revision") == "0");
}

TEST_CASE("PUT validation: out-of-range values and wrong sizes are 422") {
    const auto dir = make_data_dir("svc_422");
    Running run(dir);
    auto c = run.client();

    auto bytes = encode_cmap(ConfidenceMap(8, 6));
    bytes[17 + 3] = 150;
    auto res = c.Put("/api/labels/alpha", body_of(bytes), "application/octet-stream");
    REQUIRE(res);
    CHECK(res->status == 422);
    CHECK(json::parse(res->body)["error"] == "value out of range");

    res = c.Put("/api/labels/alpha", body_of(encode_cmap(ConfidenceMap(6, 8))), "application/octet-stream");
    REQUIRE(res);
    CHECK(res->status == 422);
    CHECK(json::parse(res->body)["error"] == "dimension mismatch");

    res = c.Put("/api/labels/alpha", "garbage", "application/octet-stream");
    REQUIRE(res);
    CHECK(res->status == 422);

    // Rejected writes leave nothing behind.
    CHECK_FALSE(fs::exists(dir / "labels" / "alpha.cmap"));
    CHECK(json::parse(c.Get("/api/images/alpha/meta")->body)["revision"] == 0);
}

TEST_CASE("PUT then GET round trips bit-exactly and bumps the revision") {
    const auto dir = make_data_dir("svc_rt");
    Rng rng(5);
    {
        Running run(dir);
        auto c = run.client();
        for (int i = 1; i <= 3; ++i) {
            const auto m = testutil::random_cmap(rng, 8, 6);
            const auto put = c.Put("/api/labels/alpha", body_of(encode_cmap(m)), "application/octet-stream");
            REQUIRE(put);
            CHECK(put->status == 200);
            CHECK(json::parse(put->body)["revision"] == i);
            const auto get = c.Get("/api/labels/alpha");
            REQUIRE(get);
            CHECK(bytes_of(get->body) == encode_cmap(m));
            CHECK(get->get_header_value("X-Revision") == std::to_string(i));
        }
        CHECK(json::parse(c.Get("/api/images/alpha/meta")->body)["has_label"] == true);
    }
    // A fresh server picks the stored label up from disk.
    const auto stored = load_cmap(dir / "labels" / "alpha.cmap");
    Running again(dir);
    auto c = again.client();
    CHECK(decode_cmap(bytes_of(c.Get("/api/labels/alpha")->body)) == stored);
    CHECK(json::parse(c.Get("/api/images/alpha/meta")->body)["has_label"] == true);
}

TEST_CASE("a stroke painted at confidence 60 survives t=60 but not t=80") {
    const auto dir = make_data_dir("svc_brush");
    Running run(dir);
    auto c = run.client();
    // What the UI sends after one brush stroke on the a_line channel.
    auto m = decode_cmap(bytes_of(c.Get("/api/labels/alpha")->body));
    const std::size_t ch = static_cast<std::size_t>(Channel::ALine);
    for (std::size_t x = 2; x < 6; ++x) m.set(ch, 3, x, 60);
    REQUIRE(c.Put("/api/labels/alpha", body_of(encode_cmap(m)), "application/octet-stream")->status == 200);

    const auto back = decode_cmap(bytes_of(c.Get("/api/labels/alpha")->body));
    const auto at60 = threshold_map(back, ConfidenceThreshold(60));
    const auto at80 = threshold_map(back, ConfidenceThreshold(80));
    for (std::size_t x = 2; x < 6; ++x) {
        CHECK(at60.at(ch, 3, x) == 1);
        CHECK(at80.at(ch, 3, x) == 0);
    }
    CHECK(std::count(at60.bits.begin(), at60.bits.end(), 1) == 4);
}

TEST_CASE("concurrent writers and readers never observe a torn map") {
    const auto dir = make_data_dir("svc_stress");
    Running run(dir);
    constexpr int kWriters = 100;
    constexpr int kReaders = 100;
    std::vector<std::vector<std::uint8_t>> written;
    written.push_back(encode_cmap(ConfidenceMap(8, 6)));
    for (int i = 0; i < kWriters; ++i) written.push_back(encode_cmap(filled(8, 6, i)));

    std::atomic<int> write_ok{0}, read_ok{0}, torn{0}, failed{0};
    std::vector<std::thread> threads;
    for (int i = 0; i < kWriters + kReaders; ++i) {
        threads.emplace_back([&, i] {
            auto c = run.client();
            if (i % 2 == 0 && i / 2 < kWriters) {
                const auto res = c.Put("/api/labels/alpha", body_of(written[static_cast<std::size_t>(i / 2 + 1)]),
                                       "application/octet-stream");
                (res && res->status == 200 ? write_ok : failed)++;
            } else {
                const auto res = c.Get("/api/labels/alpha");
                if (!res || res->status != 200) {
                    ++failed;
                    return;
                }
                const auto got = bytes_of(res->body);
                const bool known = std::find(written.begin(), written.end(), got) != written.end();
                (known ? read_ok : torn)++;
            }
        });
    }
    for (auto& t : threads) t.join();
    CHECK(failed == 0);
    CHECK(torn == 0);
    CHECK(write_ok == kWriters);
    CHECK(read_ok == kReaders);
    CHECK(json::parse(run.client().Get("/api/images/alpha/meta")->body)["revision"] == kWriters);
    const auto final_bytes = read_file_bytes(dir / "labels" / "alpha.cmap");
    CHECK(std::find(written.begin() + 1, written.end(), final_bytes) != written.end());
}

TEST_CASE("static UI assets are served from the mount point") {
    const auto dir = make_data_dir("svc_static");
    const auto ui = testutil::temp_dir("svc_static_ui");
    write_text_file(ui / "index.html", "<html>confseg</html>");
    Running run(dir, ui);
    auto c = run.client();
    const auto res = c.Get("/index.html");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(res->body == "<html>confseg</html>");
}

TEST_CASE("store rejects a data dir without images") {
    const auto dir = testutil::temp_dir("svc_empty");
    CHECK_THROWS(AnnotationStore(dir));
}
