#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "ssdlab/baselines.hpp"
#include "ssdlab/eval.hpp"
#include "ssdlab/image_io.hpp"

// httplib last: it drags in <resolv.h>, whose `res` macro breaks Eigen.
#include <httplib.h>
#ifdef res
#undef res
#endif

namespace ssdlab {

std::string fetch_caption_http(const Image& s, const CaptionProvider& endpoint) {
  httplib::Client client(endpoint.host, endpoint.port);
  client.set_connection_timeout(endpoint.timeout_s);
  client.set_read_timeout(endpoint.timeout_s);

  nlohmann::json body = {{"image", base64_encode(encode_png(s))}};
  for (int attempt = 0; attempt <= endpoint.retries; ++attempt) {
    auto res = client.Post(endpoint.path, body.dump(), "application/json");
    if (res && res->status == 200) {
      try {
        return nlohmann::json::parse(res->body).at("caption").get<std::string>();
      } catch (const std::exception& e) {
        throw ExternalServiceError(std::string("captioner: malformed response: ") + e.what());
      }
    }
  }
  throw ExternalServiceError("captioner: unreachable at " + endpoint.host + ":" +
                             std::to_string(endpoint.port));
}

std::string HttpJudge::judge(const Image& grid, const std::string& prompt_text) const {
  httplib::Client client(endpoint_.host, endpoint_.port);
  client.set_connection_timeout(endpoint_.timeout_s);
  client.set_read_timeout(endpoint_.timeout_s);

  httplib::Headers headers;
  if (const char* key = std::getenv(endpoint_.api_key_env.c_str()))
    headers.emplace("Authorization", std::string("Bearer ") + key);

  nlohmann::json body = {{"prompt", prompt_text}, {"image", base64_encode(encode_png(grid))}};
  auto res = client.Post(endpoint_.path, headers, body.dump(), "application/json");
  if (!res || res->status != 200)
    throw ExternalServiceError("judge: request failed (" +
                               (res ? std::to_string(res->status) : std::string("no response")) +
                               ")");
  std::string text;
  try {
    text = nlohmann::json::parse(res->body).at("text").get<std::string>();
  } catch (const std::exception& e) {
    throw ExternalServiceError(std::string("judge: malformed response: ") + e.what());
  }

  if (!endpoint_.transcript_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(endpoint_.transcript_dir);
    // sequential transcript index
    int index = 0;
    while (fs::exists(fs::path(endpoint_.transcript_dir) /
                      ("transcript_" + std::to_string(index) + ".json")))
      ++index;
    nlohmann::json transcript = {{"request", body}, {"response", res->body}};
    std::ofstream f(fs::path(endpoint_.transcript_dir) /
                    ("transcript_" + std::to_string(index) + ".json"));
    f << transcript.dump(2) << "\n";
  }
  return text;
}

}  // namespace ssdlab
