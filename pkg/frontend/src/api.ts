/**
 * Thin typed client for the study service.
 *
 * The fetch implementation is injectable so tests can run without a
 * network; only the documented endpoints are ever requested.
 */

import type { NextResponse, SubmitAck, SubmitBody, TaskName } from './types';

export type FetchLike = (
  input: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<{ status: number; json(): Promise<unknown> }>;

export class UnknownRaterError extends Error {}

export class DuplicateResponseError extends Error {}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

export class StudyApiClient {
  constructor(
    private readonly baseUrl: string = '',
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  async nextItem(raterId: string): Promise<NextResponse> {
    const response = await this.fetchImpl(
      `${this.baseUrl}/api/session/${encodeURIComponent(raterId)}/next`,
    );
    if (response.status === 404) {
      throw new UnknownRaterError(`rater "${raterId}" is not on the study roster`);
    }
    if (response.status !== 200) {
      throw new ApiError(response.status, `next-item request failed (${response.status})`);
    }
    return (await response.json()) as NextResponse;
  }

  async submit(raterId: string, itemId: string, task: TaskName, value: number): Promise<SubmitAck> {
    const body: SubmitBody = { item_id: itemId, task, value };
    const response = await this.fetchImpl(
      `${this.baseUrl}/api/session/${encodeURIComponent(raterId)}/response`,
      {
        method: 'POST',
        headers: { 'Content-Type': 'application/json' },
        body: JSON.stringify(body),
      },
    );
    if (response.status === 404) {
      throw new UnknownRaterError(`rater "${raterId}" is not on the study roster`);
    }
    if (response.status === 409) {
      throw new DuplicateResponseError(`${task} for item ${itemId} was already answered`);
    }
    if (response.status !== 200) {
      throw new ApiError(response.status, `submit failed (${response.status})`);
    }
    return (await response.json()) as SubmitAck;
  }
}
