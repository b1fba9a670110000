import asyncio
import json
import logging
import os
from abc import ABC, abstractmethod
from collections import Counter
from enum import Enum
from pathlib import Path
from typing import Any, Awaitable, Callable, Literal, Optional

import openai
from pydantic import BaseModel, ConfigDict, Field, model_validator

from utilities import iter_jsonl, sha256_text

logger = logging.getLogger(__name__)

MAX_STOP_SEQUENCES = 4


class GatewayError(RuntimeError):
    """A completion request failed."""

    kind = "backend_error"
    retryable = False


class GatewayTimeoutError(GatewayError):
    kind = "timeout"
    retryable = True


class BackendUnavailableError(GatewayError):
    kind = "unavailable"
    retryable = True


class RateLimitedError(GatewayError):
    kind = "rate_limit"
    retryable = True

    def __init__(self, message: str, retry_after: Optional[float] = None):
        super().__init__(message)
        self.retry_after = retry_after


class AuthenticationFailedError(GatewayError):
    kind = "auth"


class MalformedResponseError(GatewayError):
    kind = "malformed"


class MockScriptError(GatewayError):
    kind = "mock_script"


class BackendKind(str, Enum):
    REMOTE = "remote"
    MOCK = "mock"


class BackendConfig(BaseModel):
    """Connection and pacing settings for the completion backend"""

    kind: BackendKind = Field(BackendKind.MOCK, description="remote endpoint or scripted mock")
    endpoint: Optional[str] = Field(None, description="Base URL of an OpenAI-compatible API")
    model: str = Field("default", description="Model name sent with each request")
    api_key_env: str = Field("OPENAI_API_KEY", description="Environment variable holding the API key")
    timeout: float = Field(60.0, gt=0, description="Per-request timeout in seconds")
    max_retries: int = Field(3, ge=0, description="Retries for timeouts, rate limits and outages")
    max_in_flight: int = Field(4, ge=1, description="Maximum concurrent requests")
    backoff_base: float = Field(1.0, ge=0, description="First retry delay in seconds")
    backoff_max: float = Field(30.0, ge=0, description="Upper bound on a retry delay")
    mock_script: Optional[Path] = Field(None, description="JSON Lines script for the mock backend")
    mock_fallback: Literal["echo", "none"] = Field(
        "echo", description="Reply for unscripted prompts: copy the source text, or fail"
    )

    @model_validator(mode="after")
    def check_endpoint(self) -> "BackendConfig":
        if self.kind == BackendKind.REMOTE and not self.endpoint:
            raise ValueError("a remote backend needs an endpoint")
        return self


class GenerationRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    prompt: str
    max_new_tokens: int = Field(..., ge=1)
    stop_sequences: tuple[str, ...] = Field((), max_length=MAX_STOP_SEQUENCES)
    temperature: float = Field(0.0, ge=0)


class GenerationResponse(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str = Field("", description="Completion with the stop sequence removed")
    terminated_by_stop: bool = Field(False, description="True only for finish reason 'stop'")
    raw_finish_reason: str = Field("", description="Finish reason as reported by the backend")
    error: Optional[str] = Field(None, description="Error message when the request failed")
    error_kind: Optional[str] = None
    attempts: int = 1

    @classmethod
    def from_finish(cls, text: str, finish_reason: Optional[str]) -> "GenerationResponse":
        reason = finish_reason or ""
        return cls(text=text, terminated_by_stop=reason == "stop", raw_finish_reason=reason)

    @classmethod
    def failed(cls, error: GatewayError, attempts: int = 1) -> "GenerationResponse":
        return cls(
            raw_finish_reason="error",
            error=str(error),
            error_kind=error.kind,
            attempts=attempts,
        )


def cut_at_stop(text: str, stop_sequences: tuple[str, ...]) -> tuple[str, bool]:
    """Truncate text at the earliest stop sequence; report whether one was found."""
    positions = [text.find(stop) for stop in stop_sequences if stop and stop in text]
    if not positions:
        return text, False
    return text[: min(positions)], True


class CompletionBackend(ABC):
    @abstractmethod
    async def complete(self, request: GenerationRequest) -> GenerationResponse:
        """Run one completion; raise a GatewayError on failure."""


def parse_retry_after(response: Any) -> Optional[float]:
    headers = getattr(response, "headers", None) or {}
    value = headers.get("retry-after")
    try:
        return max(float(value), 0.0) if value is not None else None
    except (TypeError, ValueError):
        return None


class RemoteBackend(CompletionBackend):
    """OpenAI-compatible /completions client.

    Retries are handled by the Gateway, so the SDK's own retry loop is off.
    """

    def __init__(self, config: BackendConfig, client: Optional[openai.AsyncOpenAI] = None):
        self.config = config
        if client is None:
            api_key = os.getenv(config.api_key_env)
            if not api_key:
                logger.warning(f"{config.api_key_env} is not set, sending requests without a key")
            client = openai.AsyncOpenAI(
                api_key=api_key or "EMPTY",
                base_url=config.endpoint,
                timeout=config.timeout,
                max_retries=0,
            )
        self.client = client

    async def complete(self, request: GenerationRequest) -> GenerationResponse:
        try:
            completion = await self.client.completions.create(
                model=self.config.model,
                prompt=request.prompt,
                max_tokens=request.max_new_tokens,
                stop=list(request.stop_sequences) or None,
                temperature=request.temperature,
            )
        except openai.APITimeoutError as e:
            raise GatewayTimeoutError(f"Request timed out after {self.config.timeout}s") from e
        except openai.APIConnectionError as e:
            raise BackendUnavailableError(f"Cannot reach {self.config.endpoint}: {e}") from e
        except (openai.AuthenticationError, openai.PermissionDeniedError) as e:
            raise AuthenticationFailedError(
                f"Backend rejected the credentials from {self.config.api_key_env}"
            ) from e
        except openai.RateLimitError as e:
            raise RateLimitedError("Rate limited by backend", parse_retry_after(e.response)) from e
        except openai.InternalServerError as e:
            raise BackendUnavailableError(f"Backend error {e.status_code}") from e
        except openai.APIStatusError as e:
            raise GatewayError(f"Backend returned status {e.status_code}: {e.message}") from e
        except openai.APIResponseValidationError as e:
            raise MalformedResponseError(f"Unparseable backend payload: {e}") from e

        choices = getattr(completion, "choices", None)
        if not choices:
            raise MalformedResponseError("Backend payload has no choices")
        choice = choices[0]
        text = getattr(choice, "text", None)
        if not isinstance(text, str):
            raise MalformedResponseError("Backend choice has no text")
        # Some servers echo the stop sequence back; the contract excludes it
        text, _ = cut_at_stop(text, request.stop_sequences)
        return GenerationResponse.from_finish(text, getattr(choice, "finish_reason", None))


MockErrorKind = Literal["timeout", "auth", "rate_limit", "malformed", "unavailable"]

MOCK_ERRORS: dict[str, type[GatewayError]] = {
    "timeout": GatewayTimeoutError,
    "auth": AuthenticationFailedError,
    "rate_limit": RateLimitedError,
    "malformed": MalformedResponseError,
    "unavailable": BackendUnavailableError,
}


class MockReply(BaseModel):
    """A scripted reply to one prompt"""

    text: str = Field("", description="Raw continuation; cut at the first stop sequence")
    finish_reason: Optional[str] = Field(
        None, description="Overrides the derived finish reason ('stop' or 'length')"
    )
    error: Optional[MockErrorKind] = None
    retry_after: Optional[float] = None
    fail_times: int = Field(0, ge=0, description="Attempts that fail before the text is served; 0 = always")


def echo_source(prompt: str) -> str:
    """Recover the source text from the final slot of a translation prompt."""
    head = prompt.rsplit("\n", 1)[0]
    if not head.endswith("`"):
        raise MockScriptError("Prompt does not end with a translation slot")
    body = head[:-1]
    start = body.rfind("`\n\n")
    block = body[start + 3 :] if start >= 0 else body
    if ": `" not in block:
        raise MockScriptError("Prompt does not end with a translation slot")
    return block.split(": `", 1)[1]


class MockBackend(CompletionBackend):
    """Deterministic scripted backend.

    Replies are keyed by the SHA-256 of the full prompt. A key of the form
    "<sha256>#<n>" addresses the n-th attempt with that prompt (1-based) and
    wins over the plain key.
    """

    def __init__(
        self,
        script: Optional[dict[str, MockReply]] = None,
        fallback: Literal["echo", "none"] = "echo",
    ):
        self.script = dict(script or {})
        self.fallback = fallback
        self.seen: Counter[str] = Counter()
        self._failures: Counter[str] = Counter()

    @staticmethod
    def key_for(prompt: str, ordinal: Optional[int] = None) -> str:
        key = sha256_text(prompt)
        return f"{key}#{ordinal}" if ordinal is not None else key

    @classmethod
    def load_script(cls, path: str | Path) -> dict[str, MockReply]:
        """Read a JSON Lines script.

        Each line holds "key" (a prompt hash, optionally with "#n") or "prompt"
        (full prompt text, optionally with "ordinal"), plus MockReply fields.
        """
        script = {}
        for line_number, line in iter_jsonl(path):
            try:
                record = json.loads(line)
                if "key" in record:
                    key = record.pop("key")
                else:
                    key = cls.key_for(record.pop("prompt"), record.pop("ordinal", None))
                script[key] = MockReply.model_validate(record)
            except (ValueError, KeyError) as e:
                raise MockScriptError(f"{path}:{line_number}: bad script line ({e})") from e
        return script

    @classmethod
    def from_config(cls, config: BackendConfig) -> "MockBackend":
        script = cls.load_script(config.mock_script) if config.mock_script else {}
        logger.debug(f"Mock backend with {len(script)} scripted replies")
        return cls(script, fallback=config.mock_fallback)

    async def complete(self, request: GenerationRequest) -> GenerationResponse:
        key = self.key_for(request.prompt)
        self.seen[key] += 1
        reply = self.script.get(f"{key}#{self.seen[key]}") or self.script.get(key)

        if reply is None:
            if self.fallback == "none":
                raise MockScriptError(f"No scripted reply for prompt {key[:12]}")
            reply = MockReply(text=echo_source(request.prompt) + "`")

        if reply.error is not None:
            self._failures[key] += 1
            if reply.fail_times == 0 or self._failures[key] <= reply.fail_times:
                error_type = MOCK_ERRORS[reply.error]
                message = f"Scripted {reply.error} for prompt {key[:12]}"
                if error_type is RateLimitedError:
                    raise RateLimitedError(message, reply.retry_after)
                raise error_type(message)

        text, stopped = cut_at_stop(reply.text, request.stop_sequences)
        finish_reason = reply.finish_reason or ("stop" if stopped else "length")
        return GenerationResponse.from_finish(text, finish_reason)


class GatewayStats(BaseModel):
    requests: int = 0
    successes: int = 0
    retries: int = 0
    errors: dict[str, int] = Field(default_factory=dict)


class Gateway:
    """Retrying, concurrency-bounded front for a completion backend."""

    def __init__(
        self,
        backend: CompletionBackend,
        config: Optional[BackendConfig] = None,
        sleep: Callable[[float], Awaitable[Any]] = asyncio.sleep,
    ):
        self.backend = backend
        self.config = config or BackendConfig()
        self.stats = GatewayStats()
        self._sleep = sleep
        self._in_flight = 0
        self.peak_in_flight = 0

    @classmethod
    def from_config(cls, config: BackendConfig) -> "Gateway":
        if config.kind == BackendKind.REMOTE:
            logger.info(f"Using remote backend {config.endpoint} (model {config.model})")
            return cls(RemoteBackend(config), config)
        return cls(MockBackend.from_config(config), config)

    def backoff_delay(self, attempt: int, error: GatewayError) -> float:
        if isinstance(error, RateLimitedError) and error.retry_after is not None:
            return error.retry_after
        return min(self.config.backoff_base * 2 ** (attempt - 1), self.config.backoff_max)

    async def generate(self, request: GenerationRequest) -> GenerationResponse:
        """Run one request, retrying transient failures with exponential backoff.

        Raises:
            GatewayError: When retries are exhausted or the error is not transient
        """
        self.stats.requests += 1
        attempt = 0
        while True:
            attempt += 1
            try:
                response = await self.backend.complete(request)
            except GatewayError as e:
                if not e.retryable or attempt > self.config.max_retries:
                    self.stats.errors[e.kind] = self.stats.errors.get(e.kind, 0) + 1
                    logger.debug(f"Request failed after {attempt} attempt(s): {e}")
                    raise
                delay = self.backoff_delay(attempt, e)
                self.stats.retries += 1
                logger.debug(f"{e.kind} on attempt {attempt}, retrying in {delay:.1f}s")
                await self._sleep(delay)
                continue
            self.stats.successes += 1
            return response.model_copy(update={"attempts": attempt})

    async def generate_batch(
        self,
        requests: list[GenerationRequest],
        on_progress: Optional[Callable[[int], None]] = None,
    ) -> list[GenerationResponse]:
        """Run requests with at most max_in_flight outstanding.

        Responses line up index-for-index with requests. Failed requests
        yield a response carrying the error instead of raising.
        """
        if not requests:
            raise ValueError("generate_batch needs at least one request")
        semaphore = asyncio.Semaphore(self.config.max_in_flight)

        async def run(request: GenerationRequest) -> GenerationResponse:
            async with semaphore:
                self._in_flight += 1
                self.peak_in_flight = max(self.peak_in_flight, self._in_flight)
                try:
                    response = await self.generate(request)
                except GatewayError as e:
                    response = GenerationResponse.failed(e)
                finally:
                    self._in_flight -= 1
            if on_progress is not None:
                on_progress(1)
            return response

        return list(await asyncio.gather(*(run(request) for request in requests)))
